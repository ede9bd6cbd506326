//! Reference-model management: periodic updates of the reference toward the
//! training model, gated by an estimate of its divergence from the initial
//! model.
//!
//! The divergence between two denoisers is estimated through the forward
//! process as the difference of their denoising losses on shared `(t, ε)`
//! draws, and reported as an absolute value.

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserParams;
use crate::diffusion::{forward_sample, squared_error, NoisePredictor, NoiseSchedule, NoisedSample, Sample};
use crate::error::{Error, Result};
use crate::objectives::TimestepSampler;
use crate::seeding::{standard_normal_vec, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Reference stays at the initial model.
    Frozen,
    /// Reference copies the training model every `tau` steps, unconditionally.
    UpdateUnregularized,
    /// Copies only while the candidate is within `delta`; freezes for good
    /// on the first violation.
    UpdateFreeze,
    /// Copies while within `delta`; resets to the initial model on violation.
    UpdateReinit,
}

/// Per-timestep weight applied to each loss difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlWeighting {
    /// Plain loss difference.
    #[default]
    Unit,
    /// Gaussian-KL prefactor `T·β_t / (2 α_t (1 − ᾱ_t))` with `σ_t² = β_t`.
    GaussianKl,
}

impl KlWeighting {
    pub fn weight(self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self {
            KlWeighting::Unit => 1.0,
            KlWeighting::GaussianKl => {
                let a = schedule.alpha(t);
                let beta = 1.0 - a;
                schedule.steps() as f64 * beta / (2.0 * a * (1.0 - schedule.alpha_bar(t)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferencePolicy {
    pub mode: ReferenceMode,
    pub tau: u64,
    pub delta: f64,
    pub monitor_batch_size: usize,
    pub monitor_t_samples: usize,
    pub weighting: KlWeighting,
}

impl Default for ReferencePolicy {
    fn default() -> Self {
        Self::frozen()
    }
}

impl ReferencePolicy {
    pub fn frozen() -> Self {
        Self {
            mode: ReferenceMode::Frozen,
            tau: 64,
            delta: 0.005,
            monitor_batch_size: 16,
            monitor_t_samples: 4,
            weighting: KlWeighting::Unit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 {
            return Err(Error::Config("reference.tau must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config("reference.delta must be positive".into()));
        }
        if self.monitor_batch_size == 0 || self.monitor_t_samples == 0 {
            return Err(Error::Config("reference monitor sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefAction {
    Updated,
    SkippedFrozen,
    Reinitialized,
    NoOp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: u64,
    pub divergence: f64,
    pub action: RefAction,
}

#[derive(Debug, Clone)]
pub struct ReferenceState {
    policy: ReferencePolicy,
    ref_params: DenoiserParams,
    init_params: DenoiserParams,
    frozen: bool,
    last_divergence: f64,
    history: Vec<HistoryEntry>,
    last_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceReport {
    pub frozen: bool,
    pub last_divergence: f64,
    pub history: Vec<HistoryEntry>,
}

impl ReferenceState {
    pub fn new(policy: ReferencePolicy, init: DenoiserParams) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            policy,
            ref_params: init.snapshot(),
            init_params: init,
            frozen: false,
            last_divergence: 0.0,
            history: Vec::new(),
            last_step: None,
        })
    }

    pub fn policy(&self) -> &ReferencePolicy {
        &self.policy
    }

    pub fn reference(&self) -> &DenoiserParams {
        &self.ref_params
    }

    pub fn init(&self) -> &DenoiserParams {
        &self.init_params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    /// Read-only view of the monitoring record.
    pub fn inspect(&self) -> ReferenceReport {
        ReferenceReport {
            frozen: self.frozen,
            last_divergence: self.last_divergence,
            history: self.history.clone(),
        }
    }

    /// True when `step` falls on an update boundary and the mode is not
    /// `Frozen`.
    pub fn is_update_step(&self, step: u64) -> bool {
        self.policy.mode != ReferenceMode::Frozen && step % self.policy.tau == 0
    }

    /// Runs the update policy at `step`. `estimate` receives the candidate
    /// (`theta`) and the initial model and returns the divergence between them.
    /// On error the state is left untouched.
    pub fn maybe_update_with<F>(&mut self, step: u64, theta: &DenoiserParams, estimate: F) -> Result<RefAction>
    where
        F: FnOnce(&DenoiserParams, &DenoiserParams) -> Result<f64>,
    {
        if let Some(prev) = self.last_step {
            if step <= prev {
                return Err(Error::Input(format!(
                    "reference update steps must increase: {step} after {prev}"
                )));
            }
        }
        if !self.is_update_step(step) {
            self.last_step = Some(step);
            return Ok(RefAction::NoOp);
        }
        let div = estimate(theta, &self.init_params)?;
        if !div.is_finite() || div < 0.0 {
            return Err(Error::numeric_with(
                "divergence estimate is not a finite non-negative number",
                vec![("step", step as f64), ("divergence", div)],
            ));
        }
        let delta = self.policy.delta;
        let action = match self.policy.mode {
            ReferenceMode::Frozen => unreachable!("frozen mode never reaches an update step"),
            ReferenceMode::UpdateUnregularized => {
                self.ref_params = theta.snapshot();
                RefAction::Updated
            }
            ReferenceMode::UpdateFreeze => {
                if self.frozen {
                    RefAction::SkippedFrozen
                } else if div <= delta {
                    self.ref_params = theta.snapshot();
                    RefAction::Updated
                } else {
                    self.frozen = true;
                    RefAction::SkippedFrozen
                }
            }
            ReferenceMode::UpdateReinit => {
                if div <= delta {
                    self.ref_params = theta.snapshot();
                    RefAction::Updated
                } else {
                    self.ref_params = self.init_params.snapshot();
                    RefAction::Reinitialized
                }
            }
        };
        self.last_step = Some(step);
        self.last_divergence = div;
        self.history.push(HistoryEntry {
            step,
            divergence: div,
            action,
        });
        Ok(action)
    }

    /// [`Self::maybe_update_with`] using [`estimate_divergence`] on `monitor`.
    pub fn maybe_update(
        &mut self,
        step: u64,
        theta: &DenoiserParams,
        schedule: &NoiseSchedule,
        monitor: &[Sample],
        rng: &mut Rng,
    ) -> Result<RefAction> {
        let t_samples = self.policy.monitor_t_samples;
        let weighting = self.policy.weighting;
        self.maybe_update_with(step, theta, |cand, init| {
            estimate_divergence(cand, init, schedule, monitor, t_samples, weighting, rng)
        })
    }
}

/// `t_samples` uniform timesteps with fresh noise for every monitor item,
/// item-major.
pub fn draw_monitor(
    schedule: &NoiseSchedule,
    monitor: &[Sample],
    t_samples: usize,
    rng: &mut Rng,
) -> Result<Vec<NoisedSample>> {
    let sampler = TimestepSampler::uniform(schedule.steps());
    let mut draws = Vec::with_capacity(monitor.len() * t_samples);
    for item in monitor {
        for _ in 0..t_samples {
            let t = sampler.sample(rng);
            let eps = standard_normal_vec(rng, item.x.len());
            draws.push(forward_sample(schedule, item, t, &eps)?);
        }
    }
    Ok(draws)
}

/// Signed per-draw terms `w(t)·(‖ε − ε_a‖² − ‖ε − ε_b‖²)`.
pub fn divergence_terms<A, B>(
    a: &A,
    b: &B,
    schedule: &NoiseSchedule,
    draws: &[NoisedSample],
    weighting: KlWeighting,
) -> Result<Vec<f64>>
where
    A: NoisePredictor + ?Sized,
    B: NoisePredictor + ?Sized,
{
    draws
        .iter()
        .map(|d| {
            let ea = squared_error(&d.eps, &a.predict(&d.x_t, d.t, d.c)?);
            let eb = squared_error(&d.eps, &b.predict(&d.x_t, d.t, d.c)?);
            Ok(weighting.weight(schedule, d.t) * (ea - eb))
        })
        .collect()
}

/// `|mean of divergence terms|` over a fixed draw set.
pub fn divergence_on_draws<A, B>(
    a: &A,
    b: &B,
    schedule: &NoiseSchedule,
    draws: &[NoisedSample],
    weighting: KlWeighting,
) -> Result<f64>
where
    A: NoisePredictor + ?Sized,
    B: NoisePredictor + ?Sized,
{
    if draws.is_empty() {
        return Err(Error::Input("divergence needs at least one draw".into()));
    }
    let terms = divergence_terms(a, b, schedule, draws, weighting)?;
    Ok((terms.iter().sum::<f64>() / terms.len() as f64).abs())
}

/// Forward-process estimate of the divergence of `reference` from `init`.
pub fn estimate_divergence<A, B>(
    reference: &A,
    init: &B,
    schedule: &NoiseSchedule,
    monitor: &[Sample],
    t_samples: usize,
    weighting: KlWeighting,
    rng: &mut Rng,
) -> Result<f64>
where
    A: NoisePredictor + ?Sized,
    B: NoisePredictor + ?Sized,
{
    if monitor.is_empty() {
        return Err(Error::Input("divergence monitor set is empty".into()));
    }
    if t_samples == 0 {
        return Err(Error::Input("monitor_t_samples must be positive".into()));
    }
    let draws = draw_monitor(schedule, monitor, t_samples, rng)?;
    divergence_on_draws(reference, init, schedule, &draws, weighting)
}
