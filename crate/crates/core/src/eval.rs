//! Evaluation: oracle win rates, implicit-reward accuracy, per-timestep
//! profiles and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ancestral_sample, forward_sample, NoisePredictor, NoiseSchedule, NoisedSample, Sample};
use crate::error::{Error, Result};
use crate::objectives::{draw_pair, implicit_reward, TimestepSampler};
use crate::preference::{oracle_reward, OracleSpec, PreferencePair};
use crate::reference::{divergence_terms, KlWeighting};
use crate::seeding::{rng_from, standard_normal_vec, stream, Rng};

pub const REPORT_FORMAT: &str = "diffpo-report";
pub const REPORT_VERSION: u32 = 1;
pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_T_DRAWS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Win,
    Tie,
    Loss,
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub condition: usize,
    pub seed: u64,
    pub reward_a: Option<f64>,
    pub reward_b: Option<f64>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinRate {
    pub rate: f64,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub excluded: usize,
    /// Comparisons that completed; excluded ones are not counted.
    pub n: usize,
}

impl WinRate {
    pub fn tie_fraction(&self) -> f64 {
        ratio(self.ties, self.n)
    }

    pub fn from_comparisons(comparisons: &[Comparison]) -> Self {
        let count = |o| comparisons.iter().filter(|c| c.outcome == o).count();
        let (wins, ties, losses, excluded) = (
            count(Outcome::Win),
            count(Outcome::Tie),
            count(Outcome::Loss),
            count(Outcome::Excluded),
        );
        let n = wins + ties + losses;
        Self {
            rate: ratio(wins, n),
            wins,
            ties,
            losses,
            excluded,
            n,
        }
    }
}

fn ratio(a: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        a as f64 / n as f64
    }
}

/// Sampling stream for one (condition, seed) comparison. Depends on nothing
/// else, so a model's output for a seed never depends on its opponent.
pub fn comparison_rng(seed: u64, condition: usize) -> Rng {
    rng_from(seed, &[stream::SAMPLING, condition as u64])
}

/// Oracle-reward comparison of `model_a` against `model_b` with matched
/// sampling seeds. `a` wins only on a strictly higher reward.
pub fn win_rate<A, B>(
    model_a: &A,
    model_b: &B,
    schedule: &NoiseSchedule,
    conditions: &[usize],
    seeds: &[u64],
    oracle: &OracleSpec,
) -> Result<(WinRate, Vec<Comparison>)>
where
    A: NoisePredictor + ?Sized,
    B: NoisePredictor + ?Sized,
{
    if seeds.is_empty() {
        return Err(Error::Input("win_rate needs at least one seed".into()));
    }
    if let Some(&c) = conditions.iter().find(|&&c| c >= oracle.num_conditions()) {
        return Err(Error::Input(format!(
            "condition {c} out of range for {} conditions",
            oracle.num_conditions()
        )));
    }
    let mut comparisons = Vec::with_capacity(conditions.len() * seeds.len());
    for &c in conditions {
        for &seed in seeds {
            let reward = |m: &dyn NoisePredictor| -> Result<Option<f64>> {
                match ancestral_sample(m, schedule, c, &mut comparison_rng(seed, c)) {
                    Ok(s) => Ok(Some(oracle_reward(oracle, c, &s.x))),
                    Err(Error::Sampling { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            };
            let ra = reward(&model_a)?;
            let rb = reward(&model_b)?;
            let outcome = match (ra, rb) {
                (Some(a), Some(b)) if a > b => Outcome::Win,
                (Some(a), Some(b)) if a < b => Outcome::Loss,
                (Some(a), Some(b)) if a == b => Outcome::Tie,
                _ => Outcome::Excluded,
            };
            comparisons.push(Comparison {
                condition: c,
                seed,
                reward_a: ra,
                reward_b: rb,
                outcome,
            });
        }
    }
    Ok((WinRate::from_comparisons(&comparisons), comparisons))
}

/// Generator that returns the oracle's preferred point `μ*_c` for every
/// condition: the exact noise predictor for a point mass at `μ*_c`.
pub struct OracleOptimal<'a> {
    oracle: &'a OracleSpec,
    schedule: &'a NoiseSchedule,
}

impl<'a> OracleOptimal<'a> {
    pub fn new(oracle: &'a OracleSpec, schedule: &'a NoiseSchedule) -> Self {
        Self { oracle, schedule }
    }
}

impl NoisePredictor for OracleOptimal<'_> {
    fn data_dim(&self) -> usize {
        self.oracle.dim
    }

    fn predict(&self, x_t: &[f64], t: usize, c: usize) -> Result<Vec<f64>> {
        self.schedule.check_timestep(t)?;
        let cond = self
            .oracle
            .conditions
            .get(c)
            .ok_or_else(|| Error::Input(format!("condition {c} out of range")))?;
        let ab = self.schedule.alpha_bar(t);
        Ok(x_t
            .iter()
            .zip(&cond.preferred)
            .map(|(x, m)| (x - ab.sqrt() * m) / (1.0 - ab).sqrt())
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub ties: usize,
    pub n: usize,
}

impl Accuracy {
    pub fn tie_fraction(&self) -> f64 {
        ratio(self.ties, self.n)
    }
}

/// Fraction of `(pair, t-draw)` comparisons with `r_t(x_w) > r_t(x_l)`.
/// Timesteps are uniform; each draw shares `t` across the arms and uses
/// independent noise, in the same order as the training loss.
pub fn implicit_accuracy<P, R>(
    theta: &P,
    reference: &R,
    schedule: &NoiseSchedule,
    pairs: &[PreferencePair],
    t_draws: usize,
    rng: &mut Rng,
) -> Result<Accuracy>
where
    P: NoisePredictor + ?Sized,
    R: NoisePredictor + ?Sized,
{
    if pairs.is_empty() {
        return Err(Error::Input("implicit_accuracy needs at least one pair".into()));
    }
    if t_draws == 0 {
        return Err(Error::Input("t_draws must be positive".into()));
    }
    let sampler = TimestepSampler::uniform(schedule.steps());
    let (mut correct, mut ties, mut n) = (0usize, 0usize, 0usize);
    for pair in pairs {
        for _ in 0..t_draws {
            let d = draw_pair(&sampler, pair.x_w.len(), rng);
            let r_w = implicit_reward(theta, reference, schedule, &pair.winner(), d.t, &d.eps_w)?;
            let r_l = implicit_reward(theta, reference, schedule, &pair.loser(), d.t, &d.eps_l)?;
            n += 1;
            if r_w > r_l {
                correct += 1;
            } else if r_w == r_l {
                ties += 1;
            }
        }
    }
    Ok(Accuracy {
        accuracy: ratio(correct, n),
        ties,
        n,
    })
}

/// Inclusive timestep range of bin `b` when `{1..steps}` is split into `bins`
/// contiguous intervals.
pub fn bin_range(steps: usize, bins: usize, b: usize) -> (usize, usize) {
    (b * steps / bins + 1, (b + 1) * steps / bins)
}

fn bin_of(steps: usize, bins: usize, t: usize) -> usize {
    (0..bins)
        .find(|&b| bin_range(steps, bins, b).1 >= t)
        .expect("t within 1..=steps")
}

fn check_bins(schedule: &NoiseSchedule, bins: usize) -> Result<()> {
    if bins == 0 || bins > schedule.steps() {
        return Err(Error::Input(format!(
            "bins must be in 1..={}, got {bins}",
            schedule.steps()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileBin {
    pub t_lo: usize,
    pub t_hi: usize,
    pub n: usize,
    /// Mean of the signed terms `w(t)(‖ε−ε_ref‖² − ‖ε−ε_init‖²)`.
    pub signed: f64,
    /// `|signed|`, the per-bin analogue of the divergence estimate.
    pub divergence: f64,
}

/// Bins pre-drawn noised samples by timestep and averages the signed
/// divergence terms within each bin.
pub fn profile_from_draws<A, B>(
    reference: &A,
    init: &B,
    schedule: &NoiseSchedule,
    draws: &[NoisedSample],
    bins: usize,
    weighting: KlWeighting,
) -> Result<Vec<ProfileBin>>
where
    A: NoisePredictor + ?Sized,
    B: NoisePredictor + ?Sized,
{
    check_bins(schedule, bins)?;
    let terms = divergence_terms(reference, init, schedule, draws, weighting)?;
    let steps = schedule.steps();
    let mut sums = vec![(0usize, 0.0f64); bins];
    for (d, v) in draws.iter().zip(terms) {
        let s = &mut sums[bin_of(steps, bins, d.t)];
        s.0 += 1;
        s.1 += v;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(b, (n, sum))| {
            let (t_lo, t_hi) = bin_range(steps, bins, b);
            let signed = if n == 0 { 0.0 } else { sum / n as f64 };
            ProfileBin {
                t_lo,
                t_hi,
                n,
                signed,
                divergence: signed.abs(),
            }
        })
        .collect())
}

/// Per-bin divergence of `reference` from `init`: every sample is noised
/// once per bin at a timestep uniform within that bin.
pub fn divergence_profile<A, B>(
    reference: &A,
    init: &B,
    schedule: &NoiseSchedule,
    samples: &[Sample],
    bins: usize,
    rng: &mut Rng,
) -> Result<Vec<ProfileBin>>
where
    A: NoisePredictor + ?Sized,
    B: NoisePredictor + ?Sized,
{
    if samples.is_empty() {
        return Err(Error::Input("divergence_profile needs samples".into()));
    }
    check_bins(schedule, bins)?;
    let mut draws = Vec::with_capacity(bins * samples.len());
    for b in 0..bins {
        let (lo, hi) = bin_range(schedule.steps(), bins, b);
        for s in samples {
            let t = rng.gen_range(lo..=hi);
            let eps = standard_normal_vec(rng, s.x.len());
            draws.push(forward_sample(schedule, s, t, &eps)?);
        }
    }
    profile_from_draws(reference, init, schedule, &draws, bins, KlWeighting::Unit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBin {
    pub t_lo: usize,
    pub t_hi: usize,
    pub n: usize,
    pub mean_abs_reward: f64,
}

/// Mean `|r_t|` over both arms of every pair, with `t` uniform within each bin.
pub fn reward_profile<P, R>(
    theta: &P,
    reference: &R,
    schedule: &NoiseSchedule,
    pairs: &[PreferencePair],
    bins: usize,
    rng: &mut Rng,
) -> Result<Vec<RewardBin>>
where
    P: NoisePredictor + ?Sized,
    R: NoisePredictor + ?Sized,
{
    if pairs.is_empty() {
        return Err(Error::Input("reward_profile needs pairs".into()));
    }
    check_bins(schedule, bins)?;
    (0..bins)
        .map(|b| {
            let (t_lo, t_hi) = bin_range(schedule.steps(), bins, b);
            let mut total = 0.0;
            for p in pairs {
                let t = rng.gen_range(t_lo..=t_hi);
                let eps_w = standard_normal_vec(rng, p.x_w.len());
                let eps_l = standard_normal_vec(rng, p.x_l.len());
                total += implicit_reward(theta, reference, schedule, &p.winner(), t, &eps_w)?.abs();
                total += implicit_reward(theta, reference, schedule, &p.loser(), t, &eps_l)?.abs();
            }
            let n = 2 * pairs.len();
            Ok(RewardBin {
                t_lo,
                t_hi,
                n,
                mean_abs_reward: total / n as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin: usize,
    pub t_lo: usize,
    pub t_hi: usize,
    pub mean_abs_reward: Option<f64>,
    pub divergence: Option<f64>,
    pub signed_divergence: Option<f64>,
}

/// Joins reward and divergence profiles computed over the same bins.
pub fn bin_rows(steps: usize, bins: usize, reward: Option<&[RewardBin]>, divergence: Option<&[ProfileBin]>) -> Vec<BinRow> {
    (0..bins)
        .map(|b| {
            let (t_lo, t_hi) = bin_range(steps, bins, b);
            BinRow {
                bin: b,
                t_lo,
                t_hi,
                mean_abs_reward: reward.and_then(|r| r.get(b)).map(|r| r.mean_abs_reward),
                divergence: divergence.and_then(|d| d.get(b)).map(|d| d.divergence),
                signed_divergence: divergence.and_then(|d| d.get(b)).map(|d| d.signed),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub checkpoints: Vec<String>,
    pub seeds: Vec<u64>,
    pub oracle_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub win_rate: Option<WinRate>,
    pub implicit_accuracy: Option<Accuracy>,
    pub bins: Vec<BinRow>,
    pub comparisons: Vec<Comparison>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn new(metadata: ReportMetadata) -> Self {
        Self {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            win_rate: None,
            implicit_accuracy: None,
            bins: Vec::new(),
            comparisons: Vec::new(),
            metadata,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn bins_csv(&self) -> String {
        let mut s = String::from("bin,t_lo,t_hi,mean_abs_reward,divergence,signed_divergence\n");
        for r in &self.bins {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.bin,
                r.t_lo,
                r.t_hi,
                opt(r.mean_abs_reward),
                opt(r.divergence),
                opt(r.signed_divergence)
            );
        }
        s
    }

    pub fn comparisons_csv(&self) -> String {
        let mut s = String::from("condition,seed,reward_a,reward_b,outcome\n");
        for c in &self.comparisons {
            let outcome = serde_json::to_value(c.outcome).expect("outcome serialises");
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                c.condition,
                c.seed,
                opt(c.reward_a),
                opt(c.reward_b),
                outcome.as_str().unwrap_or_default()
            );
        }
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Parses and checks a JSON report.
pub fn parse_report(text: &str) -> Result<EvalReport> {
    let r: EvalReport = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    if r.format != REPORT_FORMAT || r.version != REPORT_VERSION {
        return Err(Error::Input(format!(
            "unsupported report {:?} version {}",
            r.format, r.version
        )));
    }
    let unit = |x: f64| (0.0..=1.0).contains(&x);
    if r.win_rate.is_some_and(|w| !unit(w.rate)) || r.implicit_accuracy.is_some_and(|a| !unit(a.accuracy)) {
        return Err(Error::Input("report rates must lie in [0, 1]".into()));
    }
    Ok(r)
}

/// Writes `report.json`, `bins.csv` and `comparisons.csv` into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("report.json", report.to_json()),
        ("bins.csv", report.bins_csv()),
        ("comparisons.csv", report.comparisons_csv()),
    ];
    files
        .into_iter()
        .map(|(name, body)| {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
