#![allow(dead_code)]

use diffpo::denoiser::{init_denoiser, Arch, DenoiserParams, GradVector};
use diffpo::seeding::seeded;
use rand::Rng;

/// Randomised net, including a non-zero output head, so every parameter has
/// a non-trivial gradient.
pub fn random_net(arch: &Arch, seed: u64, scale: f64) -> DenoiserParams {
    let mut p = init_denoiser(arch, seed).unwrap();
    let mut rng = seeded(seed ^ 0x5eed);
    for i in 0..p.num_params() {
        *p.flat_mut(i) += scale * rng.gen_range(-1.0..1.0);
    }
    p
}

pub struct FdReport {
    pub max_rel: f64,
    pub worst: usize,
    pub checked: usize,
}

/// Central differences with step `h` against an analytic gradient. The
/// relative error of each component is taken against
/// `max(|fd|, |g|, floor · ‖g‖∞)` so components that are zero up to rounding
/// do not dominate.
pub fn finite_difference_check<F>(params: &DenoiserParams, analytic: &GradVector, h: f64, floor: f64, loss: F) -> FdReport
where
    F: Fn(&DenoiserParams) -> f64,
{
    let g = analytic.to_flat();
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut work = params.clone();
    let mut report = FdReport {
        max_rel: 0.0,
        worst: 0,
        checked: g.len(),
    };
    for (i, &gi) in g.iter().enumerate() {
        let orig = *work.flat_mut(i);
        *work.flat_mut(i) = orig + h;
        let up = loss(&work);
        *work.flat_mut(i) = orig - h;
        let down = loss(&work);
        *work.flat_mut(i) = orig;
        let fd = (up - down) / (2.0 * h);
        let denom = fd.abs().max(gi.abs()).max(floor * gmax);
        let rel = (fd - gi).abs() / denom;
        if rel > report.max_rel {
            report.max_rel = rel;
            report.worst = i;
        }
    }
    report
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
