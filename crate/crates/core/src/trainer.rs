//! Deterministic training loops.
//!
//! Every step derives its own random streams from `(seed, stream, step)`, so a
//! run is a pure function of its configuration. Wall-clock time is kept out of
//! the metrics stream and written to a separate file.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::save_checkpoint;
use crate::config::{ObjectiveKind, TrainConfig};
use crate::denoiser::{adam_step, init_denoiser, DenoiserParams, OptimizerState};
use crate::diffusion::{draw_batch, draw_noised, NoiseSchedule, Sample};
use crate::error::{Error, Result};
use crate::objectives::{ddpm_loss_on_tape, dpo_pair_loss_on_tape, draw_pair, DpoConfig, TimestepSampler};
use crate::preference::{gen_preference_pairs, gen_pretrain_dataset, load_pairs, PreferencePair};
use crate::reference::{RefAction, ReferenceReport, ReferenceState};
use crate::seeding::{rng_from, stream};
use crate::tape::{grad, Tape};

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub kind: String,
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub params: DenoiserParams,
    pub metrics: Vec<MetricRecord>,
    pub reference: Option<ReferenceReport>,
    /// Final reference parameters, when a reference manager was used.
    pub reference_params: Option<DenoiserParams>,
    pub resolved_config: String,
    pub checkpoints: Vec<PathBuf>,
    pub wall_time_secs: f64,
}

impl RunArtifacts {
    pub fn metrics_jsonl(&self) -> String {
        encode_metrics(&self.metrics)
    }
}

pub fn encode_metrics(metrics: &[MetricRecord]) -> String {
    let mut s = String::new();
    for m in metrics {
        s.push_str(&serde_json::to_string(m).expect("metric serialises"));
        s.push('\n');
    }
    s
}

struct Recorder<'a> {
    out: Option<&'a Path>,
    metrics: Vec<MetricRecord>,
    checkpoints: Vec<PathBuf>,
}

impl<'a> Recorder<'a> {
    fn new(cfg: &'a TrainConfig) -> Result<Self> {
        let out = cfg.output_dir.as_deref();
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("config.toml");
            fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self {
            out,
            metrics: Vec::new(),
            checkpoints: Vec::new(),
        })
    }

    fn record(&mut self, step: u64, kind: &str, payload: serde_json::Value) {
        self.metrics.push(MetricRecord {
            step,
            kind: kind.into(),
            payload,
        });
    }

    fn checkpoint(&mut self, name: &str, params: &DenoiserParams) -> Result<()> {
        if let Some(dir) = self.out {
            let path = dir.join(name);
            save_checkpoint(&path, params)?;
            self.checkpoints.push(path);
        }
        Ok(())
    }

    fn flush(&self, wall: f64) -> Result<()> {
        if let Some(dir) = self.out {
            let path = dir.join("metrics.jsonl");
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(encode_metrics(&self.metrics).as_bytes())
                .map_err(|e| Error::io(&path, e))?;
            let tpath = dir.join("timing.json");
            fs::write(&tpath, json!({ "wall_time_secs": wall }).to_string())
                .map_err(|e| Error::io(&tpath, e))?;
        }
        Ok(())
    }
}

fn periodic_name(step: u64) -> String {
    format!("checkpoints/step_{step:06}.ckpt")
}

/// Trains a fresh denoiser on the pretraining mixture with the unweighted
/// denoising loss and uniform timesteps.
pub fn pretrain(cfg: &TrainConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let start = Instant::now();
    let oracle = cfg.oracle()?;
    let schedule = cfg.noise_schedule()?;
    let data = gen_pretrain_dataset(&oracle, cfg.data.pretrain_samples, cfg.data.data_seed)?;
    let mut params = init_denoiser(&cfg.arch(&oracle), cfg.seed)?;
    let mut opt = OptimizerState::new(&params, cfg.optimizer);
    let sampler = TimestepSampler::uniform(schedule.steps());
    let mut rec = Recorder::new(cfg)?;

    let result = (|| -> Result<()> {
        for step in 1..=cfg.train.total_steps {
            let mut brng = rng_from(cfg.seed, &[stream::STEP_BATCH, step]);
            let batch: Vec<Sample> = (0..cfg.train.batch_size)
                .map(|_| data[brng.gen_range(0..data.len())].clone())
                .collect();
            let mut lrng = rng_from(cfg.seed, &[stream::STEP_LOSS, step]);
            let draws = draw_batch(&schedule, &batch, &sampler, &mut lrng)?;
            let (loss, g) = grad(&params, |tape| ddpm_loss_on_tape(tape, &draws, |_| 1.0))
                .map_err(|e| with_step(e, step))?;
            adam_step(&mut params, &g, &mut opt)?;
            if step % cfg.train.log_every == 0 || step == 1 || step == cfg.train.total_steps {
                rec.record(step, "train", json!({ "loss": loss }));
            }
            if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
                rec.checkpoint(&periodic_name(step), &params)?;
            }
        }
        Ok(())
    })();

    finish(cfg, rec, params, None, start, result)
}

fn with_step(e: Error, step: u64) -> Error {
    match e {
        Error::Numeric {
            message,
            mut diagnostics,
        } => {
            diagnostics.push(("step".into(), step as f64));
            Error::Numeric { message, diagnostics }
        }
        other => other,
    }
}

fn finish(
    cfg: &TrainConfig,
    mut rec: Recorder<'_>,
    params: DenoiserParams,
    reference: Option<ReferenceState>,
    start: Instant,
    result: Result<()>,
) -> Result<RunArtifacts> {
    let wall = start.elapsed().as_secs_f64();
    if let Err(e) = result {
        // Parameters are only ever mutated by successful steps, so they are
        // the last good state.
        rec.checkpoint("last_good.ckpt", &params)?;
        rec.flush(wall)?;
        return Err(e);
    }
    rec.checkpoint("final.ckpt", &params)?;
    if let Some(r) = &reference {
        if r.policy().mode != crate::reference::ReferenceMode::Frozen {
            rec.checkpoint("reference.ckpt", r.reference())?;
        }
    }
    rec.flush(wall)?;
    Ok(RunArtifacts {
        params,
        metrics: rec.metrics,
        reference: reference.as_ref().map(|r| r.inspect()),
        reference_params: reference.map(|r| r.reference().clone()),
        resolved_config: cfg.to_toml()?,
        checkpoints: rec.checkpoints,
        wall_time_secs: wall,
    })
}

/// Preference pairs named by the configuration: read from `data.pairs_path`
/// when set, generated otherwise.
pub fn training_pairs(cfg: &TrainConfig) -> Result<Vec<PreferencePair>> {
    match &cfg.data.pairs_path {
        Some(p) => {
            let pairs = load_pairs(p)?;
            if pairs.is_empty() {
                return Err(Error::Input(format!("{} holds no pairs", p.display())));
            }
            Ok(pairs)
        }
        None => gen_preference_pairs(&cfg.oracle()?, cfg.data.pairs, cfg.data.data_seed),
    }
}

/// Whether the fine-tuning loop consults a reference manager.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceHandling {
    Managed,
    /// The reference is the initial model and no manager exists at all.
    FixedInit,
}

/// Preference fine-tuning from `init` with the configured objective and
/// reference policy.
pub fn finetune(cfg: &TrainConfig, init: &DenoiserParams) -> Result<RunArtifacts> {
    let pairs = training_pairs(cfg)?;
    finetune_on(cfg, init, &pairs, ReferenceHandling::Managed)
}

pub fn finetune_on(
    cfg: &TrainConfig,
    init: &DenoiserParams,
    pairs: &[PreferencePair],
    handling: ReferenceHandling,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    init.validate()?;
    if pairs.is_empty() {
        return Err(Error::Input("fine-tuning needs at least one pair".into()));
    }
    let start = Instant::now();
    let oracle = cfg.oracle()?;
    if init.arch != cfg.arch(&oracle) {
        return Err(Error::Config(
            "initial checkpoint architecture does not match the configuration".into(),
        ));
    }
    let schedule = cfg.noise_schedule()?;
    let dpo = cfg.dpo_config(&schedule)?;
    let mut params = init.snapshot();
    let mut opt = OptimizerState::new(&params, cfg.optimizer);
    let mut manager = match handling {
        ReferenceHandling::Managed => Some(ReferenceState::new(cfg.reference.clone(), init.snapshot())?),
        ReferenceHandling::FixedInit => None,
    };
    let mut rec = Recorder::new(cfg)?;

    let result = (|| -> Result<()> {
        for step in 1..=cfg.train.total_steps {
            let mut brng = rng_from(cfg.seed, &[stream::STEP_BATCH, step]);
            let batch: Vec<&PreferencePair> = (0..cfg.train.batch_size)
                .map(|_| &pairs[brng.gen_range(0..pairs.len())])
                .collect();
            let mut lrng = rng_from(cfg.seed, &[stream::STEP_LOSS, step]);
            let reference = manager.as_ref().map_or(init, |m| m.reference());

            let (loss, g, margin_mean) = match cfg.objective.kind {
                ObjectiveKind::Dpo => {
                    let draws: Vec<_> = batch
                        .iter()
                        .map(|p| draw_pair(&dpo.sampler, p.x_w.len(), &mut lrng))
                        .collect();
                    dpo_step_grad(&params, reference, &schedule, &batch, &dpo, &draws)
                }
                ObjectiveKind::Sft => {
                    let draws = batch
                        .iter()
                        .map(|p| draw_noised(&schedule, &p.winner(), &dpo.sampler, &mut lrng))
                        .collect::<Result<Vec<_>>>()?;
                    grad(&params, |tape| ddpm_loss_on_tape(tape, &draws, |_| 1.0)).map(|(l, g)| (l, g, f64::NAN))
                }
            }
            .map_err(|e| with_step(e, step))?;
            adam_step(&mut params, &g, &mut opt)?;

            if let Some(m) = manager.as_mut() {
                if m.is_update_step(step) {
                    let monitor: Vec<Sample> = batch
                        .iter()
                        .take(m.policy().monitor_batch_size)
                        .map(|p| p.winner())
                        .collect();
                    let mut mrng = rng_from(cfg.seed, &[stream::MONITOR, step]);
                    let action = m.maybe_update(step, &params, &schedule, &monitor, &mut mrng)?;
                    debug_assert_ne!(action, RefAction::NoOp);
                    let entry = m.history().last().expect("update step records history");
                    rec.record(
                        step,
                        "reference",
                        json!({ "divergence": entry.divergence, "action": entry.action }),
                    );
                }
            }

            if step % cfg.train.log_every == 0 || step == 1 || step == cfg.train.total_steps {
                let payload = if margin_mean.is_nan() {
                    json!({ "loss": loss })
                } else {
                    json!({ "loss": loss, "margin_mean": margin_mean })
                };
                rec.record(step, "train", payload);
            }
            if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
                rec.checkpoint(&periodic_name(step), &params)?;
            }
        }
        Ok(())
    })();

    finish(cfg, rec, params, manager, start, result)
}

fn dpo_step_grad(
    params: &DenoiserParams,
    reference: &DenoiserParams,
    schedule: &NoiseSchedule,
    batch: &[&PreferencePair],
    dpo: &DpoConfig,
    draws: &[crate::objectives::PairDraw],
) -> Result<(f64, crate::denoiser::GradVector, f64)> {
    let mut tape = Tape::new(params);
    let mut losses = Vec::with_capacity(batch.len());
    let mut margin_sum = 0.0;
    for (pair, draw) in batch.iter().zip(draws) {
        let (loss, margin) = dpo_pair_loss_on_tape(&mut tape, reference, schedule, pair, dpo, draw)?;
        margin_sum += tape.scalar_value(margin);
        losses.push(loss);
    }
    let root = tape.mean(&losses);
    let loss = tape.scalar_value(root);
    let margin_mean = margin_sum / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::numeric_with(
            "batch loss is not finite",
            vec![("loss", loss), ("margin_mean", margin_mean)],
        ));
    }
    let g = tape.backward(root);
    if !g.is_finite() {
        return Err(Error::numeric_with("gradient is not finite", vec![("loss", loss)]));
    }
    Ok((loss, g, margin_mean))
}
