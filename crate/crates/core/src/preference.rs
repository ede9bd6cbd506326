//! Synthetic conditional data and oracle-labelled preference pairs.
//!
//! Each condition owns a Gaussian mixture used for pretraining data and for
//! drawing candidate pairs, plus a preferred point `μ*_c`. The oracle reward
//! is `−κ·‖x − μ*_c‖²`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::Sample;
use crate::error::{Error, Result};
use crate::seeding::{rng_from, standard_normal_vec, stream, Rng};

pub const PAIRS_FORMAT: &str = "diffpo-pairs";
pub const PAIRS_VERSION: u32 = 1;
const MAX_TIE_REDRAWS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `d × d` covariance.
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub components: Vec<GaussianComponent>,
    pub preferred: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub dim: usize,
    pub kappa: f64,
    pub conditions: Vec<ConditionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub c: usize,
    pub x_w: Vec<f64>,
    pub x_l: Vec<f64>,
    pub r_w: f64,
    pub r_l: f64,
}

impl PreferencePair {
    pub fn winner(&self) -> Sample {
        Sample { x: self.x_w.clone(), c: self.c }
    }

    pub fn loser(&self) -> Sample {
        Sample { x: self.x_l.clone(), c: self.c }
    }
}

/// Lower Cholesky factor, or `None` when `a` is not positive definite.
fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        if a[i].len() != n {
            return None;
        }
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) || !d.is_finite() {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                if (a[i][j] - a[j][i]).abs() > 1e-12 * (1.0 + a[i][j].abs()) {
                    return None;
                }
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

impl OracleSpec {
    /// Eight conditions on the unit circle, `σ = 0.3`, with the preferred
    /// point at the same angle and radius 1.5; `κ = 1`.
    pub fn default_world() -> Self {
        Self::ring_world(8, 0.3, 1.0, 1.5, 1.0)
    }

    pub fn ring_world(conditions: usize, sigma: f64, radius: f64, preferred_radius: f64, kappa: f64) -> Self {
        let conditions = (0..conditions)
            .map(|c| {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / conditions as f64;
                let (s, co) = angle.sin_cos();
                ConditionSpec {
                    components: vec![GaussianComponent {
                        weight: 1.0,
                        mean: vec![radius * co, radius * s],
                        cov: vec![vec![sigma * sigma, 0.0], vec![0.0, sigma * sigma]],
                    }],
                    preferred: vec![preferred_radius * co, preferred_radius * s],
                }
            })
            .collect();
        Self {
            dim: 2,
            kappa,
            conditions,
        }
    }

    pub fn num_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if self.dim == 0 {
            issues.push("dim must be positive".to_string());
        }
        if self.conditions.is_empty() {
            issues.push("at least one condition is required".to_string());
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            issues.push(format!("kappa must be positive, got {}", self.kappa));
        }
        for (c, cond) in self.conditions.iter().enumerate() {
            if cond.preferred.len() != self.dim || cond.preferred.iter().any(|v| !v.is_finite()) {
                issues.push(format!("condition {c}: preferred point must be finite with dimension {}", self.dim));
            }
            if cond.components.is_empty() {
                issues.push(format!("condition {c}: mixture has no components"));
            }
            let total: f64 = cond.components.iter().map(|k| k.weight).sum();
            if (total - 1.0).abs() > 1e-9 || cond.components.iter().any(|k| !(k.weight >= 0.0)) {
                issues.push(format!("condition {c}: mixture weights must be non-negative and sum to 1"));
            }
            for (k, comp) in cond.components.iter().enumerate() {
                if comp.mean.len() != self.dim || comp.mean.iter().any(|v| !v.is_finite()) {
                    issues.push(format!("condition {c} component {k}: bad mean"));
                }
                if comp.cov.len() != self.dim || cholesky(&comp.cov).is_none() {
                    issues.push(format!("condition {c} component {k}: covariance is not positive definite"));
                }
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues.join("; ")))
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("oracle spec serialises");
        hex::encode(Sha256::digest(json))
    }

    /// Mean of condition `c`'s base mixture.
    pub fn mixture_mean(&self, c: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for comp in &self.conditions[c].components {
            m.iter_mut().zip(&comp.mean).for_each(|(a, b)| *a += comp.weight * b);
        }
        m
    }

    /// Parses and validates a JSON world description.
    pub fn parse(text: &str) -> Result<Self> {
        let spec: OracleSpec = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn draw(&self, c: usize, rng: &mut Rng) -> Vec<f64> {
        let comps = &self.conditions[c].components;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = &comps[comps.len() - 1];
        for comp in comps {
            acc += comp.weight;
            if u < acc {
                chosen = comp;
                break;
            }
        }
        let l = cholesky(&chosen.cov).expect("validated covariance");
        let z = standard_normal_vec(rng, self.dim);
        (0..self.dim)
            .map(|i| chosen.mean[i] + (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>())
            .collect()
    }
}

/// `−κ·‖x − μ*_c‖²`; maximal (zero) at the preferred point.
pub fn oracle_reward(spec: &OracleSpec, c: usize, x: &[f64]) -> f64 {
    let mu = &spec.conditions[c].preferred;
    -spec.kappa * x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// `n` samples with condition `i mod C` for the `i`-th draw.
pub fn gen_pretrain_dataset(spec: &OracleSpec, n: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Input("dataset size must be positive".into()));
    }
    let mut rng = rng_from(seed, &[stream::PRETRAIN_DATA]);
    let cs = spec.num_conditions();
    Ok((0..n)
        .map(|i| {
            let c = i % cs;
            Sample { x: spec.draw(c, &mut rng), c }
        })
        .collect())
}

/// Two independent draws per pair from the condition's base mixture; the one
/// with the higher oracle reward wins. Exact ties are redrawn.
pub fn gen_preference_pairs(spec: &OracleSpec, n_pairs: usize, seed: u64) -> Result<Vec<PreferencePair>> {
    spec.validate()?;
    if n_pairs == 0 {
        return Err(Error::Input("pair count must be positive".into()));
    }
    let mut rng = rng_from(seed, &[stream::PAIRS]);
    let cs = spec.num_conditions();
    let mut out = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let c = i % cs;
        let mut made = None;
        for _ in 0..MAX_TIE_REDRAWS {
            let a = spec.draw(c, &mut rng);
            let b = spec.draw(c, &mut rng);
            let (ra, rb) = (oracle_reward(spec, c, &a), oracle_reward(spec, c, &b));
            if ra > rb {
                made = Some(PreferencePair { c, x_w: a, x_l: b, r_w: ra, r_l: rb });
            } else if rb > ra {
                made = Some(PreferencePair { c, x_w: b, x_l: a, r_w: rb, r_l: ra });
            }
            if made.is_some() {
                break;
            }
        }
        out.push(made.ok_or_else(|| {
            Error::Config(format!(
                "condition {c}: {MAX_TIE_REDRAWS} consecutive reward ties; the oracle cannot rank this mixture"
            ))
        })?);
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct PairsHeader {
    format: String,
    version: u32,
    d: usize,
    #[serde(rename = "C")]
    num_conditions: usize,
    /// Record count; optional on read.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
}

/// Metadata carried by a pairs file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairsMeta {
    pub dim: usize,
    pub num_conditions: usize,
}

pub fn encode_pairs(meta: PairsMeta, pairs: &[PreferencePair]) -> String {
    let header = PairsHeader {
        format: PAIRS_FORMAT.into(),
        version: PAIRS_VERSION,
        d: meta.dim,
        num_conditions: meta.num_conditions,
        n: Some(pairs.len()),
    };
    let mut s = serde_json::to_string(&header).expect("header serialises");
    s.push('\n');
    for p in pairs {
        s.push_str(&serde_json::to_string(p).expect("pair serialises"));
        s.push('\n');
    }
    s
}

/// Parses a pairs document. An empty document is an empty list.
pub fn parse_pairs(text: &str) -> Result<(Option<PairsMeta>, Vec<PreferencePair>)> {
    if text.is_empty() {
        return Ok((None, Vec::new()));
    }
    if !text.ends_with('\n') {
        let line = text.lines().count();
        return Err(Error::Parse {
            line,
            message: "file is truncated: last record has no line terminator".into(),
        });
    }
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().expect("non-empty text has a line");
    let header: PairsHeader = serde_json::from_str(first).map_err(|e| Error::Parse {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.format != PAIRS_FORMAT || header.version != PAIRS_VERSION {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported format {:?} version {}", header.format, header.version),
        });
    }
    let meta = PairsMeta {
        dim: header.d,
        num_conditions: header.num_conditions,
    };
    let mut pairs = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse { line: lineno, message };
        let p: PreferencePair = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if p.c >= meta.num_conditions {
            return Err(bad(format!("condition {} out of range (C = {})", p.c, meta.num_conditions)));
        }
        if p.x_w.len() != meta.dim || p.x_l.len() != meta.dim {
            return Err(bad(format!("sample dimension differs from header d = {}", meta.dim)));
        }
        if !(p.r_w > p.r_l) {
            return Err(bad("winner reward must strictly exceed loser reward".into()));
        }
        if p.x_w == p.x_l {
            return Err(bad("winner and loser are identical".into()));
        }
        pairs.push(p);
    }
    if let Some(n) = header.n {
        if n != pairs.len() {
            return Err(Error::Parse {
                line: text.lines().count(),
                message: format!("header declares {n} pairs but {} were read", pairs.len()),
            });
        }
    }
    Ok((Some(meta), pairs))
}

pub fn save_pairs(path: &Path, meta: PairsMeta, pairs: &[PreferencePair]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(encode_pairs(meta, pairs).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_pairs(&text)?.1)
}
