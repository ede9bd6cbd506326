//! Experiment configuration: a TOML document with one table per concern.
//!
//! [`validate_config`] parses and checks the whole document, reporting every
//! violation with its dotted field path.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{AdamConfig, Arch};
use crate::diffusion::{default_betas, make_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::objectives::{make_sampler, make_scale_schedule, DpoConfig, SamplerKind, ScaleSchedule};
use crate::preference::OracleSpec;
use crate::reference::{ReferenceMode, ReferencePolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub objective: ObjectiveSection,
    pub sampler: SamplerSection,
    pub scale: ScaleSection,
    pub reference: ReferencePolicy,
    pub optimizer: AdamConfig,
    pub train: TrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(rename = "T")]
    pub steps: usize,
    /// Defaults to the 1000-step range rescaled to `T`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `"default"` for the built-in ring world, otherwise a JSON spec path.
    pub oracle: String,
    pub pretrain_samples: usize,
    /// Number of pairs to generate when `pairs_path` is absent.
    pub pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs_path: Option<PathBuf>,
    /// Seed for data generation; independent of the training seed so that
    /// seed sweeps can share one dataset.
    pub data_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Dpo,
    Sft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    pub kind: ObjectiveKind,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleSection {
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub total_steps: u64,
    pub batch_size: usize,
    /// Metrics cadence in steps.
    pub log_every: u64,
    /// Periodic checkpoint cadence; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            schedule: ScheduleSection::default(),
            model: ModelSection::default(),
            data: DataSection::default(),
            objective: ObjectiveSection::default(),
            sampler: SamplerSection::default(),
            scale: ScaleSection::default(),
            reference: ReferencePolicy::frozen(),
            optimizer: AdamConfig::default(),
            train: TrainSection::default(),
        }
    }
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_min: None,
            beta_max: None,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            time_embed_dim: 8,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            oracle: "default".into(),
            pretrain_samples: 16_000,
            pairs: 16_000,
            pairs_path: None,
            data_seed: 0,
        }
    }
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Dpo,
            beta: 500.0,
        }
    }
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Uniform,
            gamma: 0.9,
        }
    }
}

impl Default for ScaleSection {
    fn default() -> Self {
        Self { alpha: 0.0 }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            batch_size: 64,
            log_every: 10,
            checkpoint_every: 0,
            init_checkpoint: None,
        }
    }
}

/// One validation failure, addressed by dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

pub fn issues_to_error(issues: &[ConfigIssue]) -> Error {
    Error::Config(
        issues
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; "),
    )
}

/// Parses `raw` and checks every field. No partially valid config is returned.
pub fn validate_config(raw: &str) -> std::result::Result<TrainConfig, Vec<ConfigIssue>> {
    let cfg: TrainConfig = toml::from_str(raw).map_err(|e| {
        vec![ConfigIssue {
            path: String::new(),
            message: e.to_string().trim().to_string(),
        }]
    })?;
    let issues = cfg.check();
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(issues)
    }
}

impl TrainConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    /// All cross-field and range violations.
    pub fn check(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut push = |path: &str, message: String| {
            out.push(ConfigIssue {
                path: path.into(),
                message,
            })
        };

        // TOML integers are signed 64-bit.
        if i64::try_from(self.seed).is_err() {
            push("seed", format!("must be at most {}, got {}", i64::MAX, self.seed));
        }

        let t = self.schedule.steps;
        if t < 2 {
            push("schedule.T", format!("must be at least 2, got {t}"));
        } else {
            let (lo, hi) = self.betas();
            if !(lo > 0.0 && lo <= hi && hi < 1.0) {
                push(
                    "schedule.beta_min",
                    format!("betas must satisfy 0 < beta_min <= beta_max < 1, got ({lo}, {hi})"),
                );
            } else if let Err(e) = make_schedule(t, lo, hi) {
                push("schedule", e.to_string());
            }
        }

        if self.model.hidden.is_empty() || self.model.hidden.iter().any(|&h| h == 0) {
            push("model.hidden", "needs at least one positive width".into());
        }
        if self.model.time_embed_dim == 0 || self.model.time_embed_dim % 2 != 0 {
            push("model.time_embed_dim", "must be a positive even number".into());
        }

        if self.data.oracle != "default" && !Path::new(&self.data.oracle).exists() {
            push("data.oracle", format!("file not found: {}", self.data.oracle));
        }
        if self.data.pretrain_samples == 0 {
            push("data.pretrain_samples", "must be positive".into());
        }
        match &self.data.pairs_path {
            Some(p) if !p.exists() => push("data.pairs_path", format!("file not found: {}", p.display())),
            None if self.data.pairs == 0 => push("data.pairs", "must be positive".into()),
            _ => {}
        }

        if !(self.objective.beta > 0.0 && self.objective.beta.is_finite()) {
            push("objective.beta", format!("must be positive, got {}", self.objective.beta));
        }
        if !(self.sampler.gamma > 0.0 && self.sampler.gamma <= 1.0) {
            push(
                "sampler.gamma",
                format!("must lie in (0, 1], got {}", self.sampler.gamma),
            );
        }
        if !(self.scale.alpha >= 0.0 && self.scale.alpha.is_finite()) {
            push("scale.alpha", format!("must be >= 0, got {}", self.scale.alpha));
        }

        let r = &self.reference;
        if r.tau < 1 {
            push("reference.tau", "must be at least 1".into());
        }
        if !(r.delta > 0.0 && r.delta.is_finite()) {
            push("reference.delta", format!("must be positive, got {}", r.delta));
        }
        if r.monitor_batch_size == 0 {
            push("reference.monitor_batch_size", "must be positive".into());
        }
        if r.monitor_t_samples == 0 {
            push("reference.monitor_t_samples", "must be positive".into());
        }

        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            push("optimizer.lr", format!("must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) {
            push("optimizer.beta1", format!("must lie in [0, 1), got {}", o.beta1));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            push("optimizer.beta2", format!("must lie in [0, 1), got {}", o.beta2));
        }
        if !(o.eps > 0.0) {
            push("optimizer.eps", format!("must be positive, got {}", o.eps));
        }

        if self.train.total_steps < 1 {
            push("train.total_steps", "must be at least 1".into());
        }
        if self.train.batch_size == 0 {
            push("train.batch_size", "must be positive".into());
        }
        if self.train.log_every == 0 {
            push("train.log_every", "must be positive".into());
        }
        if let Some(p) = &self.train.init_checkpoint {
            if !p.exists() {
                push("train.init_checkpoint", format!("file not found: {}", p.display()));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.check();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues_to_error(&issues))
        }
    }

    pub fn betas(&self) -> (f64, f64) {
        let (lo, hi) = default_betas(self.schedule.steps.max(1));
        (self.schedule.beta_min.unwrap_or(lo), self.schedule.beta_max.unwrap_or(hi))
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        let (lo, hi) = self.betas();
        make_schedule(self.schedule.steps, lo, hi)
    }

    pub fn oracle(&self) -> Result<OracleSpec> {
        if self.data.oracle == "default" {
            Ok(OracleSpec::default_world())
        } else {
            OracleSpec::load(Path::new(&self.data.oracle))
        }
    }

    pub fn arch(&self, oracle: &OracleSpec) -> Arch {
        Arch {
            data_dim: oracle.dim,
            num_conditions: oracle.num_conditions(),
            time_embed_dim: self.model.time_embed_dim,
            hidden: self.model.hidden.clone(),
            num_timesteps: self.schedule.steps,
        }
    }

    pub fn dpo_config(&self, schedule: &NoiseSchedule) -> Result<DpoConfig> {
        let sampler = make_sampler(self.sampler.kind, self.sampler.gamma, schedule.steps())?;
        let scale = if self.scale.alpha == 0.0 {
            ScaleSchedule::constant(schedule.steps())
        } else {
            make_scale_schedule(schedule, self.scale.alpha)?
        };
        DpoConfig::new(self.objective.beta, sampler, scale)
    }

    pub fn with_mode(mut self, mode: ReferenceMode) -> Self {
        self.reference.mode = mode;
        self
    }
}
