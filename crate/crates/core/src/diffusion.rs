//! Discrete-time DDPM machinery: noise schedule, forward noising, the
//! weighted denoising loss and the ancestral sampler.
//!
//! Timesteps are 1-based throughout (`t ∈ {1..T}`); per-step tables are stored
//! 0-based and read through accessors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::TimestepSampler;
use crate::seeding::{standard_normal_vec, Rng};

/// Per-timestep tables for a linear-variance DDPM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    snr: Vec<f64>,
}

/// Builds a linear beta schedule with `beta_t` interpolated from `beta_min` at
/// `t = 1` to `beta_max` at `t = T`.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!(
            "schedule.T must be at least 2, got {steps}"
        )));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "schedule betas must satisfy 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    let span = (steps - 1) as f64;
    let alpha: Vec<f64> = (0..steps)
        .map(|i| 1.0 - (beta_min + i as f64 / span * (beta_max - beta_min)))
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for &a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    if alpha_bar.iter().any(|&ab| ab <= 0.0 || !ab.is_finite()) {
        return Err(Error::Config(
            "schedule underflows: cumulative alpha reaches zero".into(),
        ));
    }
    let snr = alpha_bar.iter().map(|&ab| ab / (1.0 - ab)).collect();
    Ok(NoiseSchedule {
        alpha,
        alpha_bar,
        snr,
    })
}

/// Default betas for `steps` timesteps: the classic (1e-4, 0.02) range for
/// 1000 steps, rescaled by `1000 / steps`.
pub fn default_betas(steps: usize) -> (f64, f64) {
    let scale = 1000.0 / steps as f64;
    (1e-4 * scale, 0.02 * scale)
}

impl NoiseSchedule {
    pub fn with_defaults(steps: usize) -> Result<Self> {
        let (lo, hi) = default_betas(steps);
        make_schedule(steps, lo, hi)
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn idx(&self, t: usize) -> usize {
        assert!(
            (1..=self.steps()).contains(&t),
            "timestep {t} outside 1..={}",
            self.steps()
        );
        t - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[self.idx(t)]
    }

    /// `ᾱ_{t-1}` with the convention `ᾱ_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bar(t - 1)
        }
    }

    pub fn snr(&self, t: usize) -> f64 {
        self.snr[self.idx(t)]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn snrs(&self) -> &[f64] {
        &self.snr
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::Input(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )))
        }
    }
}

/// A clean data point with its condition label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub c: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
    pub c: usize,
}

/// Closed-form marginal `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε`.
pub fn forward_sample(
    schedule: &NoiseSchedule,
    x0: &Sample,
    t: usize,
    eps: &[f64],
) -> Result<NoisedSample> {
    schedule.check_timestep(t)?;
    if eps.len() != x0.x.len() {
        return Err(Error::Input(format!(
            "noise dimension {} does not match sample dimension {}",
            eps.len(),
            x0.x.len()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x_t = x0.x.iter().zip(eps).map(|(x, e)| s * x + n * e).collect();
    Ok(NoisedSample {
        x_t,
        t,
        eps: eps.to_vec(),
        c: x0.c,
    })
}

/// One Markov transition `q(x_t | x_{t-1})`.
pub fn forward_step(schedule: &NoiseSchedule, x_prev: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
    let a = schedule.alpha(t);
    let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
    x_prev.iter().zip(eps).map(|(x, e)| s * x + n * e).collect()
}

/// Anything that predicts the injected noise `ε` from `(x_t, t, c)`.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;
    fn predict(&self, x_t: &[f64], t: usize, c: usize) -> Result<Vec<f64>>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn data_dim(&self) -> usize {
        (**self).data_dim()
    }
    fn predict(&self, x_t: &[f64], t: usize, c: usize) -> Result<Vec<f64>> {
        (**self).predict(x_t, t, c)
    }
}

/// Adapts a closure into a [`NoisePredictor`].
pub struct FnPredictor<F> {
    dim: usize,
    f: F,
}

impl<F> FnPredictor<F>
where
    F: Fn(&[f64], usize, usize) -> Vec<f64>,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> NoisePredictor for FnPredictor<F>
where
    F: Fn(&[f64], usize, usize) -> Vec<f64>,
{
    fn data_dim(&self) -> usize {
        self.dim
    }
    fn predict(&self, x_t: &[f64], t: usize, c: usize) -> Result<Vec<f64>> {
        Ok((self.f)(x_t, t, c))
    }
}

/// Draws `t` from `sampler` and `ε ~ N(0, I)` for one sample, then noises it.
pub fn draw_noised(
    schedule: &NoiseSchedule,
    x0: &Sample,
    sampler: &TimestepSampler,
    rng: &mut Rng,
) -> Result<NoisedSample> {
    let t = sampler.sample(rng);
    let eps = standard_normal_vec(rng, x0.x.len());
    forward_sample(schedule, x0, t, &eps)
}

/// Draws `(t, ε)` independently for every item, in batch order.
pub fn draw_batch(
    schedule: &NoiseSchedule,
    batch: &[Sample],
    sampler: &TimestepSampler,
    rng: &mut Rng,
) -> Result<Vec<NoisedSample>> {
    batch
        .iter()
        .map(|s| draw_noised(schedule, s, sampler, rng))
        .collect()
}

pub fn squared_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Weighted denoising loss: mean over the batch of `w(t)·‖ε − ε_θ(x_t, t, c)‖²`.
pub fn ddpm_loss<P, W>(
    predict: &P,
    schedule: &NoiseSchedule,
    batch: &[Sample],
    sampler: &TimestepSampler,
    weighting: W,
    rng: &mut Rng,
) -> Result<f64>
where
    P: NoisePredictor + ?Sized,
    W: Fn(usize) -> f64,
{
    if batch.is_empty() {
        return Err(Error::Input("ddpm_loss requires a non-empty batch".into()));
    }
    let draws = draw_batch(schedule, batch, sampler, rng)?;
    let mut total = 0.0;
    for d in &draws {
        let pred = predict.predict(&d.x_t, d.t, d.c)?;
        total += weighting(d.t) * squared_error(&d.eps, &pred);
    }
    Ok(total / draws.len() as f64)
}

/// Ancestral DDPM sampler with the posterior-mean update and
/// `σ_t² = (1−ᾱ_{t−1})/(1−ᾱ_t)·(1−α_t)`; no noise is injected at `t = 1`.
pub fn ancestral_sample<P>(
    predict: &P,
    schedule: &NoiseSchedule,
    c: usize,
    rng: &mut Rng,
) -> Result<Sample>
where
    P: NoisePredictor + ?Sized,
{
    let dim = predict.data_dim();
    let mut x = standard_normal_vec(rng, dim);
    for t in (1..=schedule.steps()).rev() {
        let eps = predict.predict(&x, t, c).map_err(|e| match e {
            Error::Input(_) | Error::Numeric { .. } => Error::Sampling { timestep: t },
            other => other,
        })?;
        let a = schedule.alpha(t);
        let ab = schedule.alpha_bar(t);
        let coef = (1.0 - a) / (1.0 - ab).sqrt();
        let inv_sqrt_a = 1.0 / a.sqrt();
        let z = if t > 1 {
            standard_normal_vec(rng, dim)
        } else {
            vec![0.0; dim]
        };
        let sigma = ((1.0 - schedule.alpha_bar_prev(t)) / (1.0 - ab) * (1.0 - a)).sqrt();
        for i in 0..dim {
            x[i] = inv_sqrt_a * (x[i] - coef * eps[i]) + sigma * z[i];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sampling { timestep: t });
        }
    }
    Ok(Sample { x, c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::make_sampler;
    use crate::objectives::SamplerKind;
    use crate::seeding::seeded;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn two_step_schedule_by_hand() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!(close(s.alpha(1), 0.9, 1e-15));
        assert!(close(s.alpha(2), 0.8, 1e-15));
        assert!(close(s.alpha_bar(1), 0.9, 1e-15));
        assert!(close(s.alpha_bar(2), 0.72, 1e-15));
        assert!(close(s.snr(2), 0.72 / 0.28, 1e-12));
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(matches!(make_schedule(1, 0.1, 0.2), Err(Error::Config(_))));
        assert!(matches!(make_schedule(10, 0.0, 0.2), Err(Error::Config(_))));
        assert!(matches!(make_schedule(10, 0.3, 0.2), Err(Error::Config(_))));
        assert!(matches!(make_schedule(10, 0.1, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn thousand_step_snr_endpoints() {
        // snr[1] = 0.9999/0.0001 ≈ 9999; snr[1000] ≈ 4.04e-5 (ᾱ_T ≈ 4.04e-5).
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!(close(s.snr(1), 9999.0, 1e-6));
        assert!(s.snr(1000) < 1e-4 && s.snr(1000) > 0.0);
        assert!(s.snr(1) > s.snr(1000));
    }

    #[test]
    fn forward_sample_by_hand() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        let x0 = Sample { x: vec![1.0, 0.0], c: 0 };
        let n = forward_sample(&s, &x0, 2, &[1.0, 1.0]).unwrap();
        let (a, b) = (0.72f64.sqrt(), 0.28f64.sqrt());
        assert!(close(n.x_t[0], a + b, 1e-12));
        assert!(close(n.x_t[1], b, 1e-12));
        assert!(close(n.x_t[0], 0.8485 + 0.5292, 1e-3));

        let zero = forward_sample(&s, &x0, 1, &[0.0, 0.0]).unwrap();
        assert_eq!(zero.x_t, vec![0.9f64.sqrt(), 0.0]);
    }

    #[test]
    fn forward_sample_rejects_dimension_mismatch() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        let x0 = Sample { x: vec![1.0, 0.0], c: 0 };
        assert!(matches!(
            forward_sample(&s, &x0, 1, &[0.0]),
            Err(Error::Input(_))
        ));
        assert!(forward_sample(&s, &x0, 3, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn exact_noise_predictor_has_zero_loss() {
        let s = NoiseSchedule::with_defaults(100).unwrap();
        let sampler = make_sampler(SamplerKind::Uniform, 1.0, 100).unwrap();
        let batch: Vec<Sample> = (0..8)
            .map(|i| Sample { x: vec![i as f64 * 0.1, -0.3], c: i % 3 })
            .collect();
        // x_t = √ᾱ x0 + √(1−ᾱ) ε, so ε is recoverable when x0 is known. The
        // closure cannot see x0, so recover it by draw replay instead.
        let mut probe = seeded(11);
        let draws = draw_batch(&s, &batch, &sampler, &mut probe).unwrap();
        let lookup = draws.clone();
        let exact = FnPredictor::new(2, move |x_t: &[f64], t, _c| {
            lookup
                .iter()
                .find(|d| d.t == t && d.x_t == x_t)
                .map(|d| d.eps.clone())
                .unwrap()
        });
        let loss = ddpm_loss(&exact, &s, &batch, &sampler, |_| 1.0, &mut seeded(11)).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn zero_predictor_loss_approaches_dimension() {
        let s = NoiseSchedule::with_defaults(100).unwrap();
        let sampler = make_sampler(SamplerKind::Uniform, 1.0, 100).unwrap();
        let batch: Vec<Sample> = (0..20_000).map(|_| Sample { x: vec![0.5, 0.5], c: 0 }).collect();
        let zero = FnPredictor::new(2, |_: &[f64], _, _| vec![0.0, 0.0]);
        let loss = ddpm_loss(&zero, &s, &batch, &sampler, |_| 1.0, &mut seeded(3)).unwrap();
        // Var(‖ε‖²) = 2d = 4, so the standard error is 2/√n ≈ 0.014.
        assert!(close(loss, 2.0, 0.06), "loss {loss}");
        let again = ddpm_loss(&zero, &s, &batch, &sampler, |_| 1.0, &mut seeded(3)).unwrap();
        assert_eq!(loss.to_bits(), again.to_bits());
    }

    #[test]
    fn empty_batch_is_rejected() {
        let s = NoiseSchedule::with_defaults(100).unwrap();
        let sampler = make_sampler(SamplerKind::Uniform, 1.0, 100).unwrap();
        let zero = FnPredictor::new(2, |_: &[f64], _, _| vec![0.0, 0.0]);
        assert!(ddpm_loss(&zero, &s, &[], &sampler, |_| 1.0, &mut seeded(0)).is_err());
    }

    #[test]
    fn sampler_reports_offending_timestep() {
        let s = NoiseSchedule::with_defaults(100).unwrap();
        let bad = FnPredictor::new(2, |_: &[f64], t, _| {
            if t == 40 {
                vec![f64::NAN, 0.0]
            } else {
                vec![0.0, 0.0]
            }
        });
        match ancestral_sample(&bad, &s, 0, &mut seeded(1)) {
            Err(Error::Sampling { timestep }) => assert_eq!(timestep, 40),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn point_mass_predictor_lands_on_the_point() {
        let s = NoiseSchedule::with_defaults(100).unwrap();
        let target = [0.7, -1.2];
        let sched = s.clone();
        let exact = FnPredictor::new(2, move |x: &[f64], t, _| {
            let ab = sched.alpha_bar(t);
            x.iter()
                .zip(target)
                .map(|(xi, m)| (xi - ab.sqrt() * m) / (1.0 - ab).sqrt())
                .collect()
        });
        for seed in 0..5 {
            let out = ancestral_sample(&exact, &s, 0, &mut seeded(seed)).unwrap();
            assert!(close(out.x[0], 0.7, 1e-9) && close(out.x[1], -1.2, 1e-9));
        }
    }
}
