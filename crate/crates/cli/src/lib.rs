//! Command-line driver: data generation, training, evaluation and schedule
//! tables, each as one subcommand.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors (including
//! missing input files), 2 for failures while running a valid experiment.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use diffpo::checkpoint::load_checkpoint;
use diffpo::config::{issues_to_error, validate_config, TrainConfig};
use diffpo::denoiser::DenoiserParams;
use diffpo::diffusion::{NoiseSchedule, Sample};
use diffpo::eval::{bin_rows, divergence_profile, emit_report, implicit_accuracy, reward_profile, win_rate, EvalReport, ReportMetadata};
use diffpo::objectives::{make_sampler, make_scale_schedule, SamplerKind};
use diffpo::preference::{gen_preference_pairs, load_pairs, save_pairs, OracleSpec, PairsMeta, PreferencePair};
use diffpo::reference::ReferenceMode;
use diffpo::seeding::{rng_from, stream};
use diffpo::trainer::{finetune, pretrain, RunArtifacts};
use diffpo::{Error, Result};

const EVAL_SEEDS: u64 = 64;
const ACCURACY_T_DRAWS: usize = 5;
const PROFILE_BINS: usize = 10;
const PROFILE_PAIRS: usize = 500;

#[derive(Debug, Parser)]
#[command(name = "diffpo", version, about = "Preference fine-tuning of toy diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate preference pairs from an oracle world.
    GenData(GenDataArgs),
    /// Pretrain a denoiser on the oracle's mixture.
    Pretrain(TrainArgs),
    /// Preference fine-tune a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Win rate, implicit accuracy and reward profile against a baseline.
    Eval(EvalArgs),
    /// Per-timestep divergence of a reference checkpoint from its initial model.
    Profile(EvalArgs),
    /// Emit the reward scale and timestep sampler tables as CSV.
    Schedules(SchedulesArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Oracle world: "default" or a JSON spec path.
    #[arg(long, default_value = "default")]
    spec: String,
    /// Number of pairs to generate.
    #[arg(long, default_value_t = 5000)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output pairs file (JSONL with a header line).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run configuration [default: built-in defaults].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of diffusion steps.
    #[arg(long = "T")]
    steps: Option<usize>,
    /// Output directory; overrides `output_dir` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Frozen,
    UpdateUnregularized,
    UpdateFreeze,
    UpdateReinit,
}

impl From<Mode> for ReferenceMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Frozen => ReferenceMode::Frozen,
            Mode::UpdateUnregularized => ReferenceMode::UpdateUnregularized,
            Mode::UpdateFreeze => ReferenceMode::UpdateFreeze,
            Mode::UpdateReinit => ReferenceMode::UpdateReinit,
        }
    }
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Initial checkpoint [default: `train.init_checkpoint` from the configuration].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Preference pairs file [default: generated from the configuration].
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Reward scale strength.
    #[arg(long)]
    alpha: Option<f64>,
    /// Timestep decay; selects the categorical sampler.
    #[arg(long)]
    gamma: Option<f64>,
    /// Reference update mode.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Steps between reference update attempts.
    #[arg(long)]
    tau: Option<u64>,
    /// Divergence bound for accepting a reference update.
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint under evaluation.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Baseline checkpoint (the pretrained model).
    #[arg(long)]
    baseline_checkpoint: PathBuf,
    /// TOML configuration supplying the oracle and schedule betas.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Oracle world; overrides the configuration.
    #[arg(long)]
    spec: Option<String>,
    /// Held-out pairs [default: generated from --seed].
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// First sampling seed; every seed in [seed, seed + 64) is used per condition.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SchedulesArgs {
    #[arg(long = "T", default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    /// Output CSV [default: standard output].
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => {
            let cfg = train_config(&a)?;
            report_run("pretrain", &cfg, &pretrain(&cfg)?);
            Ok(())
        }
        Command::Finetune(a) => run_finetune(a),
        Command::Eval(a) => eval(a),
        Command::Profile(a) => profile(a),
        Command::Schedules(a) => schedules(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            validate_config(&text).map_err(|issues| match issues_to_error(&issues) {
                Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                other => other,
            })
        }
    }
}

fn load_oracle(spec: &str) -> Result<OracleSpec> {
    if spec == "default" {
        Ok(OracleSpec::default_world())
    } else {
        OracleSpec::load(Path::new(spec))
    }
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.steps {
        cfg.schedule.steps = t;
    }
    if let Some(o) = &a.out {
        cfg.output_dir = Some(o.clone());
    }
    if cfg.output_dir.is_none() {
        return Err(Error::Config("no output directory: pass --out or set output_dir".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_run(what: &str, cfg: &TrainConfig, run: &RunArtifacts) {
    let last_loss = run
        .metrics
        .iter()
        .rev()
        .find(|m| m.kind == "train")
        .and_then(|m| m.payload.get("loss"))
        .and_then(|v| v.as_f64());
    let dir = cfg.output_dir.as_deref().unwrap_or(Path::new("."));
    println!("{what}: {} steps, seed {}", cfg.train.total_steps, cfg.seed);
    if let Some(l) = last_loss {
        println!("final loss {l:.6}");
    }
    println!("wrote {}", dir.display());
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let oracle = load_oracle(&a.spec)?;
    let pairs = gen_preference_pairs(&oracle, a.pairs, a.seed)?;
    let meta = PairsMeta {
        dim: oracle.dim,
        num_conditions: oracle.num_conditions(),
    };
    save_pairs(&a.out, meta, &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

fn run_finetune(a: FinetuneArgs) -> Result<()> {
    let mut cfg = train_config(&a.train)?;
    if let Some(p) = &a.pairs {
        cfg.data.pairs_path = Some(p.clone());
    }
    if let Some(alpha) = a.alpha {
        cfg.scale.alpha = alpha;
    }
    if let Some(gamma) = a.gamma {
        cfg.sampler.kind = SamplerKind::Categorical;
        cfg.sampler.gamma = gamma;
    }
    if let Some(m) = a.mode {
        cfg.reference.mode = m.into();
    }
    if let Some(tau) = a.tau {
        cfg.reference.tau = tau;
    }
    if let Some(delta) = a.delta {
        cfg.reference.delta = delta;
    }
    if let Some(c) = &a.checkpoint {
        cfg.train.init_checkpoint = Some(c.clone());
    }
    cfg.validate()?;
    let init_path = cfg
        .train
        .init_checkpoint
        .clone()
        .ok_or_else(|| Error::Config("no initial model: pass --checkpoint or set train.init_checkpoint".into()))?;
    let init = load_checkpoint(&init_path)?;
    report_run("finetune", &cfg, &finetune(&cfg, &init)?);
    Ok(())
}

/// Models, oracle and schedule shared by `eval` and `profile`.
struct EvalSetup {
    model: DenoiserParams,
    baseline: DenoiserParams,
    oracle: OracleSpec,
    schedule: NoiseSchedule,
    pairs: Vec<PreferencePair>,
    metadata: ReportMetadata,
}

fn eval_setup(a: &EvalArgs, seeds: Vec<u64>, generated_pairs: usize) -> Result<EvalSetup> {
    let mut cfg = load_config(a.config.as_deref())?;
    let oracle = match &a.spec {
        Some(s) => load_oracle(s)?,
        None => cfg.oracle()?,
    };
    let model = load_checkpoint(&a.checkpoint)?;
    let baseline = load_checkpoint(&a.baseline_checkpoint)?;
    if model.arch != baseline.arch {
        return Err(Error::Input(format!(
            "{} and {} have different architectures",
            a.checkpoint.display(),
            a.baseline_checkpoint.display()
        )));
    }
    if model.arch.data_dim != oracle.dim || model.arch.num_conditions != oracle.num_conditions() {
        return Err(Error::Input("checkpoint does not match the oracle world".into()));
    }
    // The chain length is a property of the trained model.
    cfg.schedule.steps = model.arch.num_timesteps;
    let schedule = cfg.noise_schedule()?;
    let pairs = match &a.pairs {
        Some(p) => load_pairs(p)?,
        None => gen_preference_pairs(&oracle, generated_pairs, a.seed)?,
    };
    if pairs.is_empty() {
        return Err(Error::Input("no evaluation pairs".into()));
    }
    let metadata = ReportMetadata {
        checkpoints: vec![a.checkpoint.display().to_string(), a.baseline_checkpoint.display().to_string()],
        seeds,
        oracle_hash: oracle.fingerprint(),
    };
    Ok(EvalSetup {
        model,
        baseline,
        oracle,
        schedule,
        pairs,
        metadata,
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let seeds: Vec<u64> = (0..EVAL_SEEDS).map(|i| a.seed.wrapping_add(i)).collect();
    let s = eval_setup(&a, seeds.clone(), 1000)?;
    let conditions: Vec<usize> = (0..s.oracle.num_conditions()).collect();
    let (rate, comparisons) = win_rate(&s.model, &s.baseline, &s.schedule, &conditions, &seeds, &s.oracle)?;
    let accuracy = implicit_accuracy(
        &s.model,
        &s.baseline,
        &s.schedule,
        &s.pairs,
        ACCURACY_T_DRAWS,
        &mut rng_from(a.seed, &[stream::ACCURACY]),
    )?;
    let rewards = reward_profile(
        &s.model,
        &s.baseline,
        &s.schedule,
        &s.pairs,
        PROFILE_BINS,
        &mut rng_from(a.seed, &[stream::PROFILE]),
    )?;
    let mut report = EvalReport::new(s.metadata);
    report.bins = bin_rows(s.schedule.steps(), PROFILE_BINS, Some(&rewards), None);
    report.win_rate = Some(rate);
    report.implicit_accuracy = Some(accuracy);
    report.comparisons = comparisons;
    emit_report(&report, &a.out)?;
    println!(
        "win rate {:.4} ({} wins, {} ties, {} losses, {} excluded of {})",
        rate.rate, rate.wins, rate.ties, rate.losses, rate.excluded, rate.n
    );
    println!("implicit accuracy {:.4} over {} comparisons", accuracy.accuracy, accuracy.n);
    println!("wrote {}", a.out.display());
    Ok(())
}

fn profile(a: EvalArgs) -> Result<()> {
    let s = eval_setup(&a, vec![a.seed], PROFILE_PAIRS)?;
    let samples: Vec<Sample> = s.pairs.iter().map(PreferencePair::winner).collect();
    let divergence = divergence_profile(
        &s.model,
        &s.baseline,
        &s.schedule,
        &samples,
        PROFILE_BINS,
        &mut rng_from(a.seed, &[stream::PROFILE]),
    )?;
    let rewards = reward_profile(
        &s.model,
        &s.baseline,
        &s.schedule,
        &s.pairs,
        PROFILE_BINS,
        &mut rng_from(a.seed, &[stream::PROFILE, 1]),
    )?;
    let mut report = EvalReport::new(s.metadata);
    report.bins = bin_rows(s.schedule.steps(), PROFILE_BINS, Some(&rewards), Some(&divergence));
    emit_report(&report, &a.out)?;
    for b in &divergence {
        println!("t {:>4}..{:<4} divergence {:.6}", b.t_lo, b.t_hi, b.divergence);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn schedules(a: SchedulesArgs) -> Result<()> {
    let schedule = NoiseSchedule::with_defaults(a.steps)?;
    let scale = make_scale_schedule(&schedule, a.alpha)?;
    let sampler = make_sampler(SamplerKind::Categorical, a.gamma, a.steps)?;
    let mut csv = String::from("t,lambda,prob,snr,alpha_bar\n");
    for t in 1..=a.steps {
        let _ = writeln!(
            csv,
            "{t},{},{},{},{}",
            scale.at(t),
            sampler.probs()[t - 1],
            schedule.snr(t),
            schedule.alpha_bar(t)
        );
    }
    match &a.out {
        Some(p) => fs::write(p, csv).map_err(|e| Error::io(p, e))?,
        None => print!("{csv}"),
    }
    Ok(())
}
