mod common;

use common::{finite_difference_check, random_net};
use diffpo::denoiser::Arch;
use diffpo::diffusion::{ddpm_loss, draw_batch, NoiseSchedule, Sample};
use diffpo::objectives::{
    ddpm_loss_on_tape, dpo_pair_loss_on_tape, dpo_pair_loss_with, draw_pair, make_sampler, make_scale_schedule,
    DpoConfig, SamplerKind, TimestepSampler,
};
use diffpo::preference::{gen_preference_pairs, OracleSpec};
use diffpo::seeding::seeded;
use diffpo::tape::grad;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-3;

fn arch() -> Arch {
    Arch::new(2, 8, vec![24, 24], 50)
}

#[test]
fn ddpm_loss_gradient_matches_finite_differences() {
    let schedule = NoiseSchedule::with_defaults(50).unwrap();
    let params = random_net(&arch(), 11, 0.2);
    assert!(params.num_params() <= 5000);
    let batch: Vec<Sample> = (0..12)
        .map(|i| Sample {
            x: vec![0.3 * i as f64 - 1.5, 0.7 - 0.1 * i as f64],
            c: i % 8,
        })
        .collect();
    let sampler = TimestepSampler::uniform(50);
    let scale = make_scale_schedule(&schedule, 1.0).unwrap();
    let draws = draw_batch(&schedule, &batch, &sampler, &mut seeded(3)).unwrap();
    let (value, g) = grad(&params, |tape| ddpm_loss_on_tape(tape, &draws, |t| scale.at(t))).unwrap();
    let plain = ddpm_loss(&params, &schedule, &batch, &sampler, |t| scale.at(t), &mut seeded(3)).unwrap();
    assert!((value - plain).abs() <= 1e-12 * plain.abs());

    let report = finite_difference_check(&params, &g, H, FLOOR, |p| {
        ddpm_loss(p, &schedule, &batch, &sampler, |t| scale.at(t), &mut seeded(3)).unwrap()
    });
    assert!(report.max_rel < TOL, "max rel {} at {}", report.max_rel, report.worst);
}

#[test]
fn dpo_loss_gradient_matches_finite_differences() {
    let schedule = NoiseSchedule::with_defaults(50).unwrap();
    let theta = random_net(&arch(), 21, 0.2);
    let reference = random_net(&arch(), 22, 0.2);
    let pairs = gen_preference_pairs(&OracleSpec::default_world(), 8, 5).unwrap();
    // βT = 1 keeps the sigmoid away from saturation.
    let cfg = DpoConfig::new(
        0.02,
        make_sampler(SamplerKind::Categorical, 0.95, 50).unwrap(),
        make_scale_schedule(&schedule, 1.0).unwrap(),
    )
    .unwrap();
    let mut rng = seeded(8);
    let draws: Vec<_> = pairs.iter().map(|_| draw_pair(&cfg.sampler, 2, &mut rng)).collect();

    let mean_loss = |p: &diffpo::denoiser::DenoiserParams| {
        pairs
            .iter()
            .zip(&draws)
            .map(|(pair, d)| dpo_pair_loss_with(p, &reference, &schedule, pair, &cfg, d).unwrap().loss)
            .sum::<f64>()
            / pairs.len() as f64
    };
    let (value, g) = grad(&theta, |tape| {
        let mut losses = Vec::new();
        for (pair, d) in pairs.iter().zip(&draws) {
            losses.push(dpo_pair_loss_on_tape(tape, &reference, &schedule, pair, &cfg, d)?.0);
        }
        Ok(tape.mean(&losses))
    })
    .unwrap();
    assert!((value - mean_loss(&theta)).abs() < 1e-12);
    let gmax = g.to_flat().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(gmax > 1e-3, "gradient is degenerate");

    let report = finite_difference_check(&theta, &g, H, FLOOR, mean_loss);
    assert!(report.max_rel < TOL, "max rel {} at {}", report.max_rel, report.worst);
}

#[test]
fn reference_receives_no_gradient() {
    // Perturbing the reference changes the loss, but the tape only ever
    // differentiates with respect to theta.
    let schedule = NoiseSchedule::with_defaults(50).unwrap();
    let theta = random_net(&arch(), 1, 0.2);
    let pairs = gen_preference_pairs(&OracleSpec::default_world(), 4, 1).unwrap();
    let cfg = DpoConfig::new(0.02, TimestepSampler::uniform(50), diffpo::objectives::ScaleSchedule::constant(50)).unwrap();
    let d = draw_pair(&cfg.sampler, 2, &mut seeded(1));
    let g_for = |reference: &diffpo::denoiser::DenoiserParams| {
        grad(&theta, |tape| Ok(dpo_pair_loss_on_tape(tape, reference, &schedule, &pairs[0], &cfg, &d)?.0))
            .unwrap()
            .1
            .to_flat()
    };
    let a = g_for(&random_net(&arch(), 2, 0.2));
    let b = g_for(&theta);
    assert_eq!(a.len(), theta.num_params());
    assert_ne!(a, b);
}
