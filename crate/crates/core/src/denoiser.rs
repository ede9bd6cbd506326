//! Conditional MLP noise predictor `ε_θ(x_t, t, c)`, its parameters,
//! gradients and the Adam optimizer.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::seeding::{rng_from, stream};
use crate::tape::{silu, Tape, Var};

/// Network shape. The input is `concat(x_t, time embedding, one-hot c)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub data_dim: usize,
    pub num_conditions: usize,
    pub time_embed_dim: usize,
    pub hidden: Vec<usize>,
    /// Largest timestep the network accepts; also scales the time embedding.
    pub num_timesteps: usize,
}

impl Arch {
    pub fn new(data_dim: usize, num_conditions: usize, hidden: Vec<usize>, num_timesteps: usize) -> Self {
        Self {
            data_dim,
            num_conditions,
            time_embed_dim: 8,
            hidden,
            num_timesteps,
        }
    }

    /// Two 64-wide hidden layers.
    pub fn standard(data_dim: usize, num_conditions: usize, num_timesteps: usize) -> Self {
        Self::new(data_dim, num_conditions, vec![64, 64], num_timesteps)
    }

    /// Convenience constructor for tests: `T = 100`.
    pub fn small(data_dim: usize, num_conditions: usize, hidden: Vec<usize>) -> Self {
        Self::new(data_dim, num_conditions, hidden, 100)
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_embed_dim + self.num_conditions
    }

    /// `(inputs, outputs)` per layer, in declared order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim()];
        widths.extend(&self.hidden);
        widths.push(self.data_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.data_dim == 0 {
            bad.push("data_dim must be positive");
        }
        if self.num_conditions == 0 {
            bad.push("num_conditions must be positive");
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            bad.push("time_embed_dim must be a positive even number");
        }
        if self.hidden.iter().any(|&h| h == 0) {
            bad.push("hidden widths must be positive");
        }
        if self.num_timesteps == 0 {
            bad.push("num_timesteps must be positive");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid architecture: {}", bad.join("; "))))
        }
    }
}

/// Dense layer with a row-major `outputs × inputs` weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub arch: Arch,
    pub layers: Vec<Layer>,
    /// Number of optimizer steps applied so far.
    pub version: u64,
}

/// Gradient (or any other buffer) shaped like a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    pub layers: Vec<LayerBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBuf {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl GradVector {
    pub fn zeros_like(params: &DenoiserParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerBuf {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias))
    }

    /// `self += k · other`, in fixed parameter order.
    pub fn add_scaled(&mut self, other: &GradVector, k: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += k * b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.values_mut().for_each(|x| *x *= k);
    }

    fn shape_matches(&self, params: &DenoiserParams) -> bool {
        self.layers.len() == params.layers.len()
            && self
                .layers
                .iter()
                .zip(&params.layers)
                .all(|(g, l)| g.weight.len() == l.weight.len() && g.bias.len() == l.bias.len())
    }
}

/// Fresh parameters: He-uniform weights, zero biases and a zero output layer,
/// so the untrained network predicts `ε = 0` everywhere.
pub fn init_denoiser(arch: &Arch, seed: u64) -> Result<DenoiserParams> {
    arch.validate()?;
    let mut rng = rng_from(seed, &[stream::INIT]);
    let shapes = arch.layer_shapes();
    let last = shapes.len() - 1;
    let layers = shapes
        .into_iter()
        .enumerate()
        .map(|(i, (inputs, outputs))| {
            let weight = if i == last {
                vec![0.0; inputs * outputs]
            } else {
                let limit = (6.0 / inputs as f64).sqrt();
                (0..inputs * outputs)
                    .map(|_| rng.gen_range(-limit..limit))
                    .collect()
            };
            Layer {
                inputs,
                outputs,
                weight,
                bias: vec![0.0; outputs],
            }
        })
        .collect();
    Ok(DenoiserParams {
        arch: arch.clone(),
        layers,
        version: 0,
    })
}

/// Sinusoidal features of `t / T` at geometrically spaced frequencies in
/// `[1, 50]`.
pub fn time_embedding(arch: &Arch, t: usize) -> Vec<f64> {
    let half = arch.time_embed_dim / 2;
    let s = t as f64 / arch.num_timesteps as f64;
    let mut out = Vec::with_capacity(arch.time_embed_dim);
    for k in 0..half {
        let freq = if half > 1 {
            50f64.powf(k as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out.push((freq * s).sin());
        out.push((freq * s).cos());
    }
    out
}

impl DenoiserParams {
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    /// Mutable reference to the `i`-th parameter in flat declared order.
    pub fn flat_mut(&mut self, mut i: usize) -> &mut f64 {
        for l in &mut self.layers {
            if i < l.weight.len() {
                return &mut l.weight[i];
            }
            i -= l.weight.len();
            if i < l.bias.len() {
                return &mut l.bias[i];
            }
            i -= l.bias.len();
        }
        panic!("flat parameter index out of range");
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    /// Checks that layer shapes agree with `arch` and values are finite.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let shapes = self.arch.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::Input(format!(
                "expected {} layers, found {}",
                shapes.len(),
                self.layers.len()
            )));
        }
        for (i, ((inp, out), l)) in shapes.iter().zip(&self.layers).enumerate() {
            if l.inputs != *inp
                || l.outputs != *out
                || l.weight.len() != inp * out
                || l.bias.len() != *out
            {
                return Err(Error::Input(format!("layer {i} has inconsistent shape")));
            }
        }
        if !self.is_finite() {
            return Err(Error::Input("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    /// Deep, independent copy.
    pub fn snapshot(&self) -> DenoiserParams {
        self.clone()
    }

    fn input_vector(&self, x_t: &[f64], t: usize, c: usize) -> Result<Vec<f64>> {
        let a = &self.arch;
        if x_t.len() != a.data_dim {
            return Err(Error::Input(format!(
                "x_t has dimension {}, expected {}",
                x_t.len(),
                a.data_dim
            )));
        }
        if x_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("x_t contains non-finite values".into()));
        }
        if !(1..=a.num_timesteps).contains(&t) {
            return Err(Error::Input(format!(
                "timestep {t} outside 1..={}",
                a.num_timesteps
            )));
        }
        if c >= a.num_conditions {
            return Err(Error::Input(format!(
                "condition {c} out of range for {} conditions",
                a.num_conditions
            )));
        }
        let mut input = Vec::with_capacity(a.input_dim());
        input.extend_from_slice(x_t);
        input.extend(time_embedding(a, t));
        input.extend((0..a.num_conditions).map(|k| if k == c { 1.0 } else { 0.0 }));
        Ok(input)
    }

    /// Forward pass without recording a tape. Arithmetic matches
    /// [`predict_on_tape`] operation for operation.
    pub fn predict_eps(&self, x_t: &[f64], t: usize, c: usize) -> Result<Vec<f64>> {
        let mut h = self.input_vector(x_t, t, c)?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut out = l.bias.clone();
            for (o, row) in out.iter_mut().zip(l.weight.chunks_exact(l.inputs)) {
                *o += row.iter().zip(&h).map(|(w, xi)| w * xi).sum::<f64>();
            }
            if i != last {
                out.iter_mut().for_each(|z| *z = silu(*z));
            }
            h = out;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("denoiser output is not finite"));
        }
        Ok(h)
    }
}

impl NoisePredictor for DenoiserParams {
    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn predict(&self, x_t: &[f64], t: usize, c: usize) -> Result<Vec<f64>> {
        self.predict_eps(x_t, t, c)
    }
}

/// Records the forward pass of the tape's parameters on `(x_t, t, c)`.
pub fn predict_on_tape(tape: &mut Tape<'_>, x_t: &[f64], t: usize, c: usize) -> Result<Var> {
    let params = tape.params();
    let input = params.input_vector(x_t, t, c)?;
    let mut h = tape.constant(input);
    let last = params.layers.len() - 1;
    for i in 0..params.layers.len() {
        h = tape.affine(i, h);
        if i != last {
            h = tape.silu(h);
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: GradVector,
    pub v: GradVector,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &DenoiserParams, config: AdamConfig) -> Self {
        Self {
            config,
            m: GradVector::zeros_like(params),
            v: GradVector::zeros_like(params),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update (no weight decay). Increments both the
/// optimizer step count and `params.version`.
pub fn adam_step(params: &mut DenoiserParams, grads: &GradVector, state: &mut OptimizerState) -> Result<()> {
    if !grads.shape_matches(params) || !state.m.shape_matches(params) {
        return Err(Error::Input("gradient shape does not match parameters".into()));
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .values_mut()
        .zip(grads.values())
        .zip(state.m.values_mut())
        .zip(state.v.values_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    params.version += 1;
    Ok(())
}
