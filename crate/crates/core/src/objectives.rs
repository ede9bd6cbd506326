//! Preference-optimization losses and the timestep-aware training knobs:
//! categorical timestep oversampling and the SNR-based reward scale schedule.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::predict_on_tape;
use crate::diffusion::{ddpm_loss, forward_sample, squared_error, NoisePredictor, NoiseSchedule, NoisedSample, Sample};
use crate::error::{Error, Result};
use crate::preference::PreferencePair;
use crate::seeding::{standard_normal_vec, Rng};
use crate::tape::{log_sigmoid, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    Categorical,
}

/// Distribution over timesteps `{1..T}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepSampler {
    kind: SamplerKind,
    gamma: f64,
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

/// Builds `Cat(γ^t)`: `probs[t] = γ^t / Σ_{t'} γ^{t'}`. `γ = 1` (or
/// `kind = Uniform`) yields the uniform sampler.
pub fn make_sampler(kind: SamplerKind, gamma: f64, steps: usize) -> Result<TimestepSampler> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("sampler.gamma must lie in (0, 1], got {gamma}")));
    }
    if steps == 0 {
        return Err(Error::Config("sampler needs at least one timestep".into()));
    }
    let kind = if gamma == 1.0 { SamplerKind::Uniform } else { kind };
    let probs: Vec<f64> = match kind {
        SamplerKind::Uniform => vec![1.0 / steps as f64; steps],
        SamplerKind::Categorical => {
            // γ^{t-1} keeps the leading weight at 1 so small γ cannot underflow it.
            let w: Vec<f64> = (0..steps).map(|i| gamma.powi(i as i32)).collect();
            let total: f64 = w.iter().sum();
            w.into_iter().map(|x| x / total).collect()
        }
    };
    let mut cdf = Vec::with_capacity(steps);
    let mut acc = 0.0;
    for p in &probs {
        acc += p;
        cdf.push(acc);
    }
    Ok(TimestepSampler {
        kind,
        gamma: if kind == SamplerKind::Uniform { 1.0 } else { gamma },
        probs,
        cdf,
    })
}

impl TimestepSampler {
    pub fn uniform(steps: usize) -> Self {
        make_sampler(SamplerKind::Uniform, 1.0, steps).expect("uniform sampler is always valid")
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn steps(&self) -> usize {
        self.probs.len()
    }

    /// `probs[t - 1]` is the probability of timestep `t`.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, t: usize) -> f64 {
        self.probs[t - 1]
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        match self.kind {
            SamplerKind::Uniform => rng.gen_range(1..=self.steps()),
            SamplerKind::Categorical => {
                let u: f64 = rng.gen::<f64>() * self.cdf[self.cdf.len() - 1];
                let i = self.cdf.partition_point(|&c| c <= u);
                i.min(self.steps() - 1) + 1
            }
        }
    }
}

/// Per-timestep reward scale `λ(t) = 1 + α · norm(1/√SNR(t))` with min–max
/// normalisation over `{1..T}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    alpha: f64,
    values: Vec<f64>,
}

pub fn make_scale_schedule(schedule: &NoiseSchedule, alpha: f64) -> Result<ScaleSchedule> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("scale.alpha must be finite and >= 0, got {alpha}")));
    }
    let w: Vec<f64> = schedule.snrs().iter().map(|s| 1.0 / s.sqrt()).collect();
    let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) || !hi.is_finite() {
        return Err(Error::Config(
            "scale schedule is degenerate: 1/sqrt(SNR) is constant over time".into(),
        ));
    }
    let values = w.iter().map(|x| 1.0 + alpha * ((x - lo) / (hi - lo))).collect();
    Ok(ScaleSchedule { alpha, values })
}

impl ScaleSchedule {
    /// `λ(t) = 1` for every `t`.
    pub fn constant(steps: usize) -> Self {
        Self {
            alpha: 0.0,
            values: vec![1.0; steps],
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn at(&self, t: usize) -> f64 {
        self.values[t - 1]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn steps(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoConfig {
    /// Regularisation coefficient `β`.
    pub beta: f64,
    pub sampler: TimestepSampler,
    pub scale: ScaleSchedule,
}

impl DpoConfig {
    pub fn new(beta: f64, sampler: TimestepSampler, scale: ScaleSchedule) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("objective.beta must be positive, got {beta}")));
        }
        if sampler.steps() != scale.steps() {
            return Err(Error::Config(format!(
                "sampler covers {} timesteps but scale schedule covers {}",
                sampler.steps(),
                scale.steps()
            )));
        }
        Ok(Self { beta, sampler, scale })
    }

    pub fn steps(&self) -> usize {
        self.sampler.steps()
    }

    /// The factor `β · T · λ(t)` multiplying the reward margin.
    pub fn margin_scale(&self, t: usize) -> f64 {
        self.beta * self.steps() as f64 * self.scale.at(t)
    }
}

/// Timestep-wise implicit reward
/// `r_t(x_0) = −(‖ε − ε_θ(x_t, t)‖² − ‖ε − ε_ref(x_t, t)‖²)`,
/// with the same `x_t` fed to both models.
pub fn implicit_reward<P, R>(
    theta: &P,
    reference: &R,
    schedule: &NoiseSchedule,
    x0: &Sample,
    t: usize,
    eps: &[f64],
) -> Result<f64>
where
    P: NoisePredictor + ?Sized,
    R: NoisePredictor + ?Sized,
{
    let n = forward_sample(schedule, x0, t, eps)?;
    reward_at(theta, reference, &n)
}

fn reward_at<P, R>(theta: &P, reference: &R, n: &NoisedSample) -> Result<f64>
where
    P: NoisePredictor + ?Sized,
    R: NoisePredictor + ?Sized,
{
    let err_theta = squared_error(&n.eps, &theta.predict(&n.x_t, n.t, n.c)?);
    let err_ref = squared_error(&n.eps, &reference.predict(&n.x_t, n.t, n.c)?);
    let r = err_ref - err_theta;
    if !r.is_finite() {
        return Err(Error::numeric_with(
            "implicit reward is not finite",
            vec![("t", n.t as f64), ("err_theta", err_theta), ("err_ref", err_ref)],
        ));
    }
    Ok(r)
}

/// Randomness for one preference comparison: a shared timestep and
/// independent noise for each arm.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDraw {
    pub t: usize,
    pub eps_w: Vec<f64>,
    pub eps_l: Vec<f64>,
}

pub fn draw_pair(sampler: &TimestepSampler, dim: usize, rng: &mut Rng) -> PairDraw {
    let t = sampler.sample(rng);
    let eps_w = standard_normal_vec(rng, dim);
    let eps_l = standard_normal_vec(rng, dim);
    PairDraw { t, eps_w, eps_l }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    pub t: usize,
    pub r_w: f64,
    pub r_l: f64,
    pub margin: f64,
}

fn winner_loser(pair: &PreferencePair) -> (Sample, Sample) {
    (
        Sample { x: pair.x_w.clone(), c: pair.c },
        Sample { x: pair.x_l.clone(), c: pair.c },
    )
}

/// `−log σ(β T λ(t) · (r_t(x_w) − r_t(x_l)))` for an explicit draw.
pub fn dpo_pair_loss_with<P, R>(
    theta: &P,
    reference: &R,
    schedule: &NoiseSchedule,
    pair: &PreferencePair,
    cfg: &DpoConfig,
    draw: &PairDraw,
) -> Result<PairLoss>
where
    P: NoisePredictor + ?Sized,
    R: NoisePredictor + ?Sized,
{
    let (w, l) = winner_loser(pair);
    let r_w = reward_at(theta, reference, &forward_sample(schedule, &w, draw.t, &draw.eps_w)?)?;
    let r_l = reward_at(theta, reference, &forward_sample(schedule, &l, draw.t, &draw.eps_l)?)?;
    let margin = r_w - r_l;
    let loss = -log_sigmoid(cfg.margin_scale(draw.t) * margin);
    if !loss.is_finite() {
        return Err(Error::numeric_with(
            "pair loss is not finite",
            vec![("t", draw.t as f64), ("r_w", r_w), ("r_l", r_l), ("margin", margin)],
        ));
    }
    Ok(PairLoss {
        loss,
        t: draw.t,
        r_w,
        r_l,
        margin,
    })
}

/// Diffusion-DPO pair loss with `(t, ε_w, ε_l)` drawn from `rng`.
pub fn dpo_pair_loss<P, R>(
    theta: &P,
    reference: &R,
    schedule: &NoiseSchedule,
    pair: &PreferencePair,
    cfg: &DpoConfig,
    rng: &mut Rng,
) -> Result<PairLoss>
where
    P: NoisePredictor + ?Sized,
    R: NoisePredictor + ?Sized,
{
    let draw = draw_pair(&cfg.sampler, pair.x_w.len(), rng);
    dpo_pair_loss_with(theta, reference, schedule, pair, cfg, &draw)
}

/// Records the pair loss for the tape's parameters against a fixed reference.
/// Returns `(loss, margin)` nodes.
pub fn dpo_pair_loss_on_tape<R>(
    tape: &mut Tape<'_>,
    reference: &R,
    schedule: &NoiseSchedule,
    pair: &PreferencePair,
    cfg: &DpoConfig,
    draw: &PairDraw,
) -> Result<(Var, Var)>
where
    R: NoisePredictor + ?Sized,
{
    let (w, l) = winner_loser(pair);
    let nw = forward_sample(schedule, &w, draw.t, &draw.eps_w)?;
    let nl = forward_sample(schedule, &l, draw.t, &draw.eps_l)?;
    let ref_w = squared_error(&nw.eps, &reference.predict(&nw.x_t, nw.t, nw.c)?);
    let ref_l = squared_error(&nl.eps, &reference.predict(&nl.x_t, nl.t, nl.c)?);

    let mut arm = |n: &NoisedSample, ref_err: f64| -> Result<Var> {
        let pred = predict_on_tape(tape, &n.x_t, n.t, n.c)?;
        let eps = tape.constant(n.eps.clone());
        let diff = tape.sub(eps, pred);
        let err = tape.sq_norm(diff);
        let re = tape.scalar(ref_err);
        Ok(tape.sub(re, err))
    };
    let r_w = arm(&nw, ref_w)?;
    let r_l = arm(&nl, ref_l)?;
    let margin = tape.sub(r_w, r_l);
    let z = tape.scale(margin, cfg.margin_scale(draw.t));
    let ls = tape.log_sigmoid(z);
    Ok((tape.neg(ls), margin))
}

/// Records `w(t)·‖ε − ε_θ(x_t, t, c)‖²` averaged over pre-drawn noised samples.
pub fn ddpm_loss_on_tape<W>(tape: &mut Tape<'_>, draws: &[NoisedSample], weighting: W) -> Result<Var>
where
    W: Fn(usize) -> f64,
{
    if draws.is_empty() {
        return Err(Error::Input("ddpm_loss requires a non-empty batch".into()));
    }
    let mut terms = Vec::with_capacity(draws.len());
    for d in draws {
        let pred = predict_on_tape(tape, &d.x_t, d.t, d.c)?;
        let eps = tape.constant(d.eps.clone());
        let diff = tape.sub(eps, pred);
        let err = tape.sq_norm(diff);
        terms.push(tape.scale(err, weighting(d.t)));
    }
    Ok(tape.mean(&terms))
}

/// Supervised baseline: the denoising loss on the winner only, `λ ≡ 1`.
pub fn sft_loss<P>(
    theta: &P,
    schedule: &NoiseSchedule,
    pair: &PreferencePair,
    cfg: &DpoConfig,
    rng: &mut Rng,
) -> Result<f64>
where
    P: NoisePredictor + ?Sized,
{
    let winner = Sample { x: pair.x_w.clone(), c: pair.c };
    ddpm_loss(theta, schedule, std::slice::from_ref(&winner), &cfg.sampler, |_| 1.0, rng)
}
