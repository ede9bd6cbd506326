//! Reverse-mode differentiation over a small set of vector primitives.
//!
//! A [`Tape`] records operations whose values are dense `f64` vectors
//! (scalars are length-1 vectors). Parameters enter only through
//! [`Tape::affine`] and the raw parameter views, so a backward pass yields a
//! [`GradVector`] shaped like the [`DenoiserParams`] the tape was built over.
//! Nodes that do not depend on parameters are never visited on the way back.

use crate::denoiser::{DenoiserParams, GradVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Weights(usize),
    Bias(usize),
    Affine { layer: usize, input: usize },
    Silu(usize),
    Add(usize, usize),
    Sub(usize, usize),
    /// Elementwise product; a length-1 operand broadcasts.
    Mul(usize, usize),
    Scale(usize, f64),
    SqNorm(usize),
    Sum(Vec<usize>),
    /// Elementwise `log σ(x)`.
    LogSigmoid(usize),
}

struct Node {
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

pub struct Tape<'p> {
    params: &'p DenoiserParams,
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log σ(x) = −softplus(−x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p DenoiserParams) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p DenoiserParams {
        self.params
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        let tracked = match &op {
            Op::Leaf => false,
            Op::Weights(_) | Op::Bias(_) | Op::Affine { .. } => true,
            Op::Silu(a) | Op::Scale(a, _) | Op::SqNorm(a) | Op::LogSigmoid(a) => {
                self.nodes[*a].tracked
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.nodes[*a].tracked || self.nodes[*b].tracked
            }
            Op::Sum(xs) => xs.iter().any(|&i| self.nodes[i].tracked),
        };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![value], Op::Leaf)
    }

    /// Flattened weight matrix of `layer` as a differentiable vector.
    pub fn weights(&mut self, layer: usize) -> Var {
        let v = self.params.layers[layer].weight.clone();
        self.push(v, Op::Weights(layer))
    }

    pub fn bias(&mut self, layer: usize) -> Var {
        let v = self.params.layers[layer].bias.clone();
        self.push(v, Op::Bias(layer))
    }

    /// `W_layer · x + b_layer`.
    pub fn affine(&mut self, layer: usize, x: Var) -> Var {
        let l = &self.params.layers[layer];
        let input = &self.nodes[x.0].value;
        assert_eq!(input.len(), l.inputs, "affine input width mismatch");
        let mut out = l.bias.clone();
        for (o, row) in out.iter_mut().zip(l.weight.chunks_exact(l.inputs)) {
            *o += row.iter().zip(input).map(|(w, xi)| w * xi).sum::<f64>();
        }
        self.push(out, Op::Affine { layer, input: x.0 })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.iter().map(|&z| silu(z)).collect();
        self.push(v, Op::Silu(x.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "add length mismatch");
        let v = va.iter().zip(vb).map(|(x, y)| x + y).collect();
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "sub length mismatch");
        let v = va.iter().zip(vb).map(|(x, y)| x - y).collect();
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let v = match (va.len(), vb.len()) {
            (n, m) if n == m => va.iter().zip(vb).map(|(x, y)| x * y).collect(),
            (1, _) => vb.iter().map(|y| va[0] * y).collect(),
            (_, 1) => va.iter().map(|x| x * vb[0]).collect(),
            (n, m) => panic!("mul length mismatch {n} vs {m}"),
        };
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| k * x).collect();
        self.push(v, Op::Scale(a.0, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `‖a‖²` as a scalar.
    pub fn sq_norm(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().map(|x| x * x).sum();
        self.push(vec![s], Op::SqNorm(a.0))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut s = 0.0;
        for x in xs {
            let v = &self.nodes[x.0].value;
            assert_eq!(v.len(), 1, "sum expects scalar nodes");
            s += v[0];
        }
        self.push(vec![s], Op::Sum(xs.iter().map(|v| v.0).collect()))
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "mean of no terms");
        let s = self.sum(xs);
        self.scale(s, 1.0 / xs.len() as f64)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.iter().map(|&z| log_sigmoid(z)).collect();
        self.push(v, Op::LogSigmoid(a.0))
    }

    /// Back-propagates from the scalar `root`, returning `∂root/∂params`.
    pub fn backward(&self, root: Var) -> GradVector {
        let mut grads = GradVector::zeros_like(self.params);
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
            match &mut adj[i] {
                Some(v) => v.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g.to_vec()),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Weights(l) => grads.layers[*l]
                    .weight
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, b)| *a += b),
                Op::Bias(l) => grads.layers[*l]
                    .bias
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, b)| *a += b),
                Op::Affine { layer, input } => {
                    let l = &self.params.layers[*layer];
                    let x = &self.nodes[*input].value;
                    let gl = &mut grads.layers[*layer];
                    for (o, &go) in g.iter().enumerate() {
                        gl.bias[o] += go;
                        if go != 0.0 {
                            let row = &mut gl.weight[o * l.inputs..(o + 1) * l.inputs];
                            row.iter_mut().zip(x).for_each(|(w, xi)| *w += go * xi);
                        }
                    }
                    if self.nodes[*input].tracked {
                        let mut gx = vec![0.0; l.inputs];
                        for (row, &go) in l.weight.chunks_exact(l.inputs).zip(&g) {
                            gx.iter_mut().zip(row).for_each(|(a, w)| *a += go * w);
                        }
                        acc(&mut adj, *input, &gx);
                    }
                }
                Op::Silu(a) => {
                    let x = &self.nodes[*a].value;
                    let gx: Vec<f64> = g.iter().zip(x).map(|(go, &xi)| go * silu_grad(xi)).collect();
                    acc(&mut adj, *a, &gx);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, &g);
                    acc(&mut adj, *b, &g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    acc(&mut adj, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (ga, gb): (Vec<f64>, Vec<f64>) = match (va.len(), vb.len()) {
                        (n, m) if n == m => (
                            g.iter().zip(vb).map(|(x, y)| x * y).collect(),
                            g.iter().zip(va).map(|(x, y)| x * y).collect(),
                        ),
                        (1, _) => (
                            vec![g.iter().zip(vb).map(|(x, y)| x * y).sum()],
                            g.iter().map(|x| x * va[0]).collect(),
                        ),
                        _ => (
                            g.iter().map(|x| x * vb[0]).collect(),
                            vec![g.iter().zip(va).map(|(x, y)| x * y).sum()],
                        ),
                    };
                    if self.nodes[*a].tracked {
                        acc(&mut adj, *a, &ga);
                    }
                    if self.nodes[*b].tracked {
                        acc(&mut adj, *b, &gb);
                    }
                }
                Op::Scale(a, k) => {
                    let gx: Vec<f64> = g.iter().map(|x| k * x).collect();
                    acc(&mut adj, *a, &gx);
                }
                Op::SqNorm(a) => {
                    let gx: Vec<f64> = self.nodes[*a].value.iter().map(|x| 2.0 * x * g[0]).collect();
                    acc(&mut adj, *a, &gx);
                }
                Op::Sum(xs) => {
                    for &x in xs {
                        if self.nodes[x].tracked {
                            acc(&mut adj, x, &g);
                        }
                    }
                }
                Op::LogSigmoid(a) => {
                    // d/dz log σ(z) = σ(−z)
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*a].value)
                        .map(|(go, &z)| go * sigmoid(-z))
                        .collect();
                    acc(&mut adj, *a, &gx);
                }
            }
        }
        grads
    }
}

/// Evaluates `loss_fn` on a fresh tape over `params` and returns the loss
/// together with its exact gradient.
pub fn grad<F>(params: &DenoiserParams, loss_fn: F) -> Result<(f64, GradVector)>
where
    F: FnOnce(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let root = loss_fn(&mut tape)?;
    let loss = tape.scalar_value(root);
    if !loss.is_finite() {
        return Err(Error::numeric_with(
            "loss is not finite",
            vec![("loss", loss), ("tape_nodes", tape.len() as f64)],
        ));
    }
    let g = tape.backward(root);
    if !g.is_finite() {
        return Err(Error::numeric_with("gradient is not finite", vec![("loss", loss)]));
    }
    Ok((loss, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_denoiser, Arch};

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!((log_sigmoid(1.0) + 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!((log_sigmoid(-1.0) + 1.313_261_687_518_222_8).abs() < 1e-12);
        assert_eq!(log_sigmoid(1e4), -0.0);
        assert!((log_sigmoid(-1e4) + 1e4).abs() < 1e-9);
        assert!(log_sigmoid(-1e308).is_finite());
    }

    #[test]
    fn quadratic_gradient_equals_params() {
        let p = init_denoiser(&Arch::small(2, 3, vec![4, 5]), 9).unwrap();
        let (loss, g) = grad(&p, |tape| {
            let mut terms = Vec::new();
            for l in 0..tape.params().layers.len() {
                let w = tape.weights(l);
                let b = tape.bias(l);
                terms.push(tape.sq_norm(w));
                terms.push(tape.sq_norm(b));
            }
            let s = tape.sum(&terms);
            Ok(tape.scale(s, 0.5))
        })
        .unwrap();
        let flat = p.to_flat();
        let expected: f64 = flat.iter().map(|x| x * x).sum::<f64>() / 2.0;
        assert!((loss - expected).abs() < 1e-12);
        assert_eq!(g.to_flat(), flat);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = init_denoiser(&Arch::small(2, 3, vec![4]), 1).unwrap();
        let (loss, g) = grad(&p, |tape| Ok(tape.scalar(3.5))).unwrap();
        assert_eq!(loss, 3.5);
        assert!(g.to_flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let p = init_denoiser(&Arch::small(2, 3, vec![4]), 1).unwrap();
        let err = grad(&p, |tape| Ok(tape.scalar(f64::NAN))).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }
}
