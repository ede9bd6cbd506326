//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::{finite_difference_check, median, random_net};
use diffpo::config::TrainConfig;
use diffpo::denoiser::{Arch, DenoiserParams};
use diffpo::diffusion::{ddpm_loss, draw_batch, NoiseSchedule, Sample};
use diffpo::eval::{divergence_profile, implicit_accuracy, win_rate};
use diffpo::objectives::{
    ddpm_loss_on_tape, dpo_pair_loss, dpo_pair_loss_on_tape, dpo_pair_loss_with, draw_pair, make_sampler,
    make_scale_schedule, DpoConfig, SamplerKind, ScaleSchedule, TimestepSampler,
};
use diffpo::preference::{gen_preference_pairs, OracleSpec, PreferencePair};
use diffpo::reference::{estimate_divergence, KlWeighting, RefAction, ReferenceMode, ReferencePolicy, ReferenceState};
use diffpo::seeding::seeded;
use diffpo::tape::grad;
use diffpo::trainer::{finetune_on, pretrain, ReferenceHandling, RunArtifacts};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn c1_loss_identity() -> Verdict {
    let schedule = NoiseSchedule::with_defaults(100).unwrap();
    let arch = Arch::standard(2, 8, 100);
    let cfg = DpoConfig::new(
        500.0,
        make_sampler(SamplerKind::Categorical, 0.9, 100).unwrap(),
        make_scale_schedule(&schedule, 1.0).unwrap(),
    )
    .unwrap();
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let theta = random_net(&arch, seed, 0.3);
        let pair = &gen_preference_pairs(&OracleSpec::default_world(), 1, seed).unwrap()[0];
        let l = dpo_pair_loss(&theta, &theta.snapshot(), &schedule, pair, &cfg, &mut seeded(seed)).unwrap();
        worst = worst.max((l.loss - std::f64::consts::LN_2).abs());
    }
    verdict(worst <= 1e-9, format!("max |loss - ln 2| = {worst:.3e} over 100 pairs"))
}

fn c2_gradients() -> Verdict {
    let schedule = NoiseSchedule::with_defaults(50).unwrap();
    let arch = Arch::new(2, 8, vec![24, 24], 50);
    let n_params = arch.num_params();

    let params = random_net(&arch, 7, 0.2);
    let batch: Vec<Sample> = (0..12)
        .map(|i| Sample {
            x: vec![0.25 * i as f64 - 1.4, 0.9 - 0.15 * i as f64],
            c: i % 8,
        })
        .collect();
    let sampler = make_sampler(SamplerKind::Categorical, 0.95, 50).unwrap();
    let scale = make_scale_schedule(&schedule, 1.0).unwrap();
    let draws = draw_batch(&schedule, &batch, &sampler, &mut seeded(1)).unwrap();
    let (_, g) = grad(&params, |tape| ddpm_loss_on_tape(tape, &draws, |t| scale.at(t))).unwrap();
    let ddpm = finite_difference_check(&params, &g, 1e-5, 1e-3, |p| {
        ddpm_loss(p, &schedule, &batch, &sampler, |t| scale.at(t), &mut seeded(1)).unwrap()
    });

    let theta = random_net(&arch, 8, 0.2);
    let reference = random_net(&arch, 9, 0.2);
    let pairs = gen_preference_pairs(&OracleSpec::default_world(), 8, 3).unwrap();
    let cfg = DpoConfig::new(0.02, sampler.clone(), scale.clone()).unwrap();
    let mut rng = seeded(2);
    let pd: Vec<_> = pairs.iter().map(|_| draw_pair(&cfg.sampler, 2, &mut rng)).collect();
    let (_, g) = grad(&theta, |tape| {
        let mut ls = Vec::new();
        for (p, d) in pairs.iter().zip(&pd) {
            ls.push(dpo_pair_loss_on_tape(tape, &reference, &schedule, p, &cfg, d)?.0);
        }
        Ok(tape.mean(&ls))
    })
    .unwrap();
    let dpo = finite_difference_check(&theta, &g, 1e-5, 1e-3, |p| {
        pairs
            .iter()
            .zip(&pd)
            .map(|(pair, d)| dpo_pair_loss_with(p, &reference, &schedule, pair, &cfg, d).unwrap().loss)
            .sum::<f64>()
            / pairs.len() as f64
    });
    verdict(
        n_params <= 5000 && ddpm.max_rel < 1e-4 && dpo.max_rel < 1e-4,
        format!(
            "{n_params} params; max rel err ddpm {:.2e}, dpo {:.2e}",
            ddpm.max_rel, dpo.max_rel
        ),
    )
}

fn c3_sampler_law() -> Verdict {
    let sampler = make_sampler(SamplerKind::Categorical, 0.9, 100).unwrap();
    let n = 1_000_000;
    let mut counts = vec![0usize; 100];
    let mut rng = seeded(3);
    for _ in 0..n {
        counts[sampler.sample(&mut rng) - 1] += 1;
    }
    let tv = 0.5
        * counts
            .iter()
            .zip(sampler.probs())
            .map(|(&c, p)| (c as f64 / n as f64 - p).abs())
            .sum::<f64>();
    let flat = make_sampler(SamplerKind::Categorical, 1.0, 100).unwrap();
    let uniform_exact = flat.probs() == TimestepSampler::uniform(100).probs()
        && flat.probs().iter().all(|&p| p == 1.0 / 100.0);
    verdict(
        tv < 0.005 && uniform_exact,
        format!("TV over 10^6 draws = {tv:.5}; gamma = 1 uniform exactly: {uniform_exact}"),
    )
}

fn c4_scale_schedule() -> Verdict {
    let mut ok = true;
    for steps in [50, 100, 1000] {
        let schedule = NoiseSchedule::with_defaults(steps).unwrap();
        for alpha in [0.0, 0.5, 1.0, 3.0] {
            let l = make_scale_schedule(&schedule, alpha).unwrap();
            let v = l.values();
            ok &= v.iter().all(|&x| (1.0..=1.0 + alpha).contains(&x));
            ok &= l.at(1) == 1.0 && l.at(steps) == 1.0 + alpha;
            ok &= v.windows(2).all(|w| w[0] <= w[1]);
            if alpha == 0.0 {
                ok &= v == ScaleSchedule::constant(steps).values();
            }
        }
    }
    verdict(ok, "bounds, endpoints, monotonicity and the alpha = 0 identity for T in {50, 100, 1000}")
}

fn c5_monitor_identities() -> Verdict {
    let schedule = NoiseSchedule::with_defaults(100).unwrap();
    let arch = Arch::standard(2, 8, 100);
    let monitor: Vec<Sample> = gen_preference_pairs(&OracleSpec::default_world(), 16, 1)
        .unwrap()
        .iter()
        .map(PreferencePair::winner)
        .collect();
    let mut zero = true;
    for seed in 0..5 {
        let p = random_net(&arch, seed, 0.3);
        for w in [KlWeighting::Unit, KlWeighting::GaussianKl] {
            zero &= estimate_divergence(&p, &p.snapshot(), &schedule, &monitor, 4, w, &mut seeded(seed)).unwrap() == 0.0;
        }
    }
    let walk = |mode| {
        let delta = 0.005;
        let policy = ReferencePolicy {
            mode,
            tau: 4,
            delta,
            ..ReferencePolicy::frozen()
        };
        let mut state = ReferenceState::new(policy, random_net(&arch, 0, 0.1)).unwrap();
        [0.2, 0.6, 1.4, 0.3]
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let theta = random_net(&arch, i as u64 + 1, 0.1);
                state
                    .maybe_update_with(4 * (i as u64 + 1), &theta, |_, _| Ok(k * delta))
                    .unwrap()
            })
            .collect::<Vec<_>>()
    };
    use RefAction::*;
    let freeze = walk(ReferenceMode::UpdateFreeze);
    let reinit = walk(ReferenceMode::UpdateReinit);
    let ok = zero && freeze == [Updated, Updated, SkippedFrozen, SkippedFrozen] && reinit == [Updated, Updated, Reinitialized, Updated];
    verdict(ok, format!("self-divergence zero: {zero}; freeze {freeze:?}; reinit {reinit:?}"))
}

/// Shared state for the training-based criteria.
struct Lab {
    base: DenoiserParams,
    base_cfg: TrainConfig,
    schedule: NoiseSchedule,
    oracle: OracleSpec,
    pairs: Vec<PreferencePair>,
    held_out: Vec<PreferencePair>,
}

const FINETUNE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const CALIBRATION_SEEDS: [u64; 3] = [101, 102, 103];
const DELTA_GRID: [f64; 3] = [0.01, 0.02, 0.03];

#[derive(Clone, Copy, Debug, PartialEq)]
enum Variant {
    Frozen,
    Update,
    UpdateOversample,
    Full,
}

impl Variant {
    const ALL: [Variant; 4] = [Variant::Frozen, Variant::Update, Variant::UpdateOversample, Variant::Full];

    fn label(self) -> &'static str {
        match self {
            Variant::Frozen => "frozen DPO",
            Variant::Update => "+update",
            Variant::UpdateOversample => "+update+oversampling",
            Variant::Full => "+update+oversampling+scale",
        }
    }
}

impl Lab {
    fn new() -> Self {
        let mut base_cfg = TrainConfig::default();
        base_cfg.train.total_steps = 4000;
        base_cfg.train.batch_size = 128;
        base_cfg.train.log_every = 500;
        base_cfg.optimizer.lr = 2e-3;
        let base = pretrain(&base_cfg).unwrap().params;
        let oracle = base_cfg.oracle().unwrap();
        Self {
            base,
            schedule: base_cfg.noise_schedule().unwrap(),
            pairs: gen_preference_pairs(&oracle, base_cfg.data.pairs, 0).unwrap(),
            held_out: gen_preference_pairs(&oracle, 1000, 777).unwrap(),
            oracle,
            base_cfg,
        }
    }

    fn config(&self, variant: Variant, seed: u64, delta: f64) -> TrainConfig {
        let mut cfg = self.base_cfg.clone();
        cfg.seed = seed;
        cfg.train.total_steps = 1000;
        cfg.train.batch_size = 64;
        cfg.train.log_every = 50;
        cfg.optimizer.lr = 1e-3;
        cfg.objective.beta = 500.0;
        cfg.reference = ReferencePolicy {
            mode: ReferenceMode::UpdateFreeze,
            tau: 64,
            delta,
            ..ReferencePolicy::frozen()
        };
        cfg.sampler.gamma = 0.9;
        match variant {
            Variant::Frozen => cfg.reference.mode = ReferenceMode::Frozen,
            Variant::Update => {}
            Variant::UpdateOversample => cfg.sampler.kind = SamplerKind::Categorical,
            Variant::Full => {
                cfg.sampler.kind = SamplerKind::Categorical;
                cfg.scale.alpha = 1.0;
            }
        }
        cfg
    }

    fn train(&self, cfg: &TrainConfig) -> RunArtifacts {
        finetune_on(cfg, &self.base, &self.pairs, ReferenceHandling::Managed).unwrap()
    }

    fn win_rate(&self, model: &DenoiserParams, eval_seeds: std::ops::Range<u64>) -> f64 {
        let conditions: Vec<usize> = (0..self.oracle.num_conditions()).collect();
        let seeds: Vec<u64> = eval_seeds.collect();
        win_rate(model, &self.base, &self.schedule, &conditions, &seeds, &self.oracle)
            .unwrap()
            .0
            .rate
    }
}

struct Grid {
    delta: f64,
    sweep: Vec<(f64, f64)>,
    runs: Vec<(Variant, u64, RunArtifacts, f64)>,
}

impl Grid {
    fn rates(&self, v: Variant) -> Vec<f64> {
        self.runs.iter().filter(|r| r.0 == v).map(|r| r.3).collect()
    }

    fn model(&self, v: Variant, seed: u64) -> &RunArtifacts {
        &self.runs.iter().find(|r| r.0 == v && r.1 == seed).unwrap().2
    }
}

fn run_grid(lab: &Lab) -> Grid {
    // Pick δ on calibration seeds and sampling seeds that the final
    // comparison never uses.
    let sweep: Vec<(f64, f64)> = DELTA_GRID
        .iter()
        .map(|&delta| {
            let rates = CALIBRATION_SEEDS
                .iter()
                .map(|&s| lab.win_rate(&lab.train(&lab.config(Variant::Full, s, delta)).params, 5000..5064))
                .collect();
            (delta, median(rates))
        })
        .collect();
    let delta = sweep
        .iter()
        .fold((f64::NAN, f64::NEG_INFINITY), |best, &(d, r)| if r > best.1 { (d, r) } else { best })
        .0;

    let mut runs = Vec::new();
    for v in Variant::ALL {
        for seed in FINETUNE_SEEDS {
            let run = lab.train(&lab.config(v, seed, delta));
            let rate = lab.win_rate(&run.params, 0..128);
            runs.push((v, seed, run, rate));
        }
    }
    Grid { delta, sweep, runs }
}

fn c6_baseline_identity(lab: &Lab) -> Verdict {
    let cfg = lab.config(Variant::Frozen, 11, 0.01);
    let managed = finetune_on(&cfg, &lab.base, &lab.pairs, ReferenceHandling::Managed).unwrap();
    let plain = finetune_on(&cfg, &lab.base, &lab.pairs, ReferenceHandling::FixedInit).unwrap();
    let bits = |p: &DenoiserParams| p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same_params = bits(&managed.params) == bits(&plain.params);
    let same_metrics = managed.metrics_jsonl() == plain.metrics_jsonl();
    verdict(
        same_params && same_metrics,
        format!(
            "{} steps; parameters bit-identical: {same_params}; metrics identical: {same_metrics}",
            cfg.train.total_steps
        ),
    )
}

fn c7_ordering(grid: &Grid) -> Verdict {
    let medians: Vec<f64> = Variant::ALL.iter().map(|&v| median(grid.rates(v))).collect();
    let monotone = medians.windows(2).all(|w| w[0] <= w[1]);
    let gain = medians[3] - medians[0];
    let table = Variant::ALL
        .iter()
        .zip(&medians)
        .map(|(v, m)| format!("{} {:.3}", v.label(), m))
        .collect::<Vec<_>>()
        .join(", ");
    let sweep = grid
        .sweep
        .iter()
        .map(|(d, r)| format!("{d}:{r:.3}"))
        .collect::<Vec<_>>()
        .join(" ");
    verdict(
        monotone && gain >= 0.03,
        format!(
            "median win rate vs base: {table}; full - frozen = {:+.1} pp; delta = {} (sweep {sweep})",
            100.0 * gain,
            grid.delta
        ),
    )
}

fn c8_accuracy(lab: &Lab, grid: &Grid) -> Verdict {
    let acc = |v: Variant| {
        median(
            FINETUNE_SEEDS
                .iter()
                .map(|&s| {
                    implicit_accuracy(&grid.model(v, s).params, &lab.base, &lab.schedule, &lab.held_out, 5, &mut seeded(s))
                        .unwrap()
                        .accuracy
                })
                .collect(),
        )
    };
    let (full, frozen) = (acc(Variant::Full), acc(Variant::Frozen));
    verdict(
        full > 0.55 && full > frozen,
        format!("median implicit accuracy on 1000 held-out pairs: full {full:.4}, frozen {frozen:.4}"),
    )
}

fn c9_degeneration(lab: &Lab, grid: &Grid) -> Verdict {
    let delta = grid.delta;
    let samples: Vec<Sample> = lab.held_out.iter().take(256).map(PreferencePair::winner).collect();
    let mass = |run: &RunArtifacts| {
        let reference = run.reference_params.as_ref().unwrap();
        let bins = divergence_profile(reference, &lab.base, &lab.schedule, &samples, 10, &mut seeded(9)).unwrap();
        bins.iter().map(|b| b.divergence).sum::<f64>() / bins.len() as f64
    };
    let mut unreg = lab.config(Variant::Update, 1, delta);
    unreg.reference.mode = ReferenceMode::UpdateUnregularized;
    unreg.reference.tau = 8;
    let unreg_run = lab.train(&unreg);
    let mut freeze = unreg.clone();
    freeze.reference.mode = ReferenceMode::UpdateFreeze;
    let freeze_run = lab.train(&freeze);

    let accepted = |run: &RunArtifacts| {
        run.reference
            .as_ref()
            .unwrap()
            .history
            .iter()
            .filter(|h| h.action == RefAction::Updated)
            .map(|h| h.divergence)
            .collect::<Vec<_>>()
    };
    let mut all_accepted = accepted(&freeze_run);
    for (v, _, run, _) in &grid.runs {
        if *v != Variant::Frozen {
            all_accepted.extend(accepted(run));
        }
    }
    let max_accepted = all_accepted.iter().cloned().fold(0.0, f64::max);
    let (m_unreg, m_freeze) = (mass(&unreg_run), mass(&freeze_run));
    verdict(
        m_unreg >= 2.0 * delta && max_accepted <= delta,
        format!(
            "tau = 8: unregularized profile mass {m_unreg:.4} vs 2*delta = {:.3}; freeze mass {m_freeze:.4}; \
             max accepted divergence {max_accepted:.4} over {} accepted updates",
            2.0 * delta,
            all_accepted.len()
        ),
    )
}

fn c10_reproducibility(lab: &Lab, grid: &Grid) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut same = true;
    let mut cfg = lab.config(Variant::Full, 1, grid.delta);
    let mut streams = Vec::new();
    for i in 0..2 {
        cfg.output_dir = Some(dir.path().join(format!("finetune{i}")));
        lab.train(&cfg);
        streams.push(std::fs::read(dir.path().join(format!("finetune{i}/metrics.jsonl"))).unwrap());
    }
    same &= streams[0] == streams[1];
    same &= streams[0] == grid.model(Variant::Full, 1).metrics_jsonl().into_bytes();

    let mut pre = lab.base_cfg.clone();
    pre.train.total_steps = 300;
    let mut pre_streams = Vec::new();
    for i in 0..2 {
        pre.output_dir = Some(dir.path().join(format!("pretrain{i}")));
        pretrain(&pre).unwrap();
        pre_streams.push(std::fs::read(dir.path().join(format!("pretrain{i}/metrics.jsonl"))).unwrap());
    }
    same &= pre_streams[0] == pre_streams[1];
    verdict(
        same,
        format!(
            "fine-tune and pretrain metrics byte-identical across invocations: {same} ({} bytes)",
            streams[0].len()
        ),
    )
}

type Check<'a> = Box<dyn FnOnce() -> Verdict + 'a>;

fn main() -> ExitCode {
    let start = Instant::now();
    let mut failures = 0;
    let mut report = |id: u32, name: &str, budget_secs: f64, check: Check<'_>| {
        let t = Instant::now();
        let v = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        let pass = v.pass && secs < budget_secs;
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {id:>2} {} {name}: {} [{secs:.1}s, budget {budget_secs}s]",
            if pass { "PASS" } else { "FAIL" },
            v.detail
        );
    };

    report(1, "loss identity", 1.0, Box::new(c1_loss_identity));
    report(2, "gradient correctness", 30.0, Box::new(c2_gradients));
    report(3, "sampler law", 5.0, Box::new(c3_sampler_law));
    report(4, "scale schedule", 1.0, Box::new(c4_scale_schedule));
    report(5, "divergence monitor", 1.0, Box::new(c5_monitor_identities));

    let t = Instant::now();
    let lab = Lab::new();
    let pretrain_secs = t.elapsed().as_secs_f64();
    report(6, "baseline identity", 120.0, Box::new(|| c6_baseline_identity(&lab)));

    let t = Instant::now();
    let grid = run_grid(&lab);
    let grid_secs = pretrain_secs + t.elapsed().as_secs_f64();
    report(7, "ablation ordering", 900.0 - grid_secs, Box::new(|| c7_ordering(&grid)));
    report(8, "implicit accuracy", 120.0, Box::new(|| c8_accuracy(&lab, &grid)));
    report(9, "degeneration", 300.0, Box::new(|| c9_degeneration(&lab, &grid)));
    report(10, "reproducibility", 300.0, Box::new(|| c10_reproducibility(&lab, &grid)));

    println!(
        "acceptance: {} of 10 criteria passed in {:.1}s (pretraining and the criterion 7 grid took {grid_secs:.1}s)",
        10 - failures,
        start.elapsed().as_secs_f64()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
