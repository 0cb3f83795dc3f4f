//! DDIM algebra against an f64 schedule oracle.

use proptest::prelude::*;
use sketchmotion_core::noise;
use sketchmotion_core::{
    ddim_invert, ddim_sample, ddim_step, make_schedule, q_sample, AttentionHooks, Denoiser,
    DenoiserConfig, DenoiserWeights, DiffusionSchedule, NoiseModel, Prompt, Tape, Tensor, Var,
};

/// ᾱ at every training step, straight from the β ramp in f64.
fn alpha_bar_oracle(train_steps: usize, b0: f64, b1: f64) -> Vec<f64> {
    let mut acc = 1.0;
    (0..train_steps)
        .map(|s| {
            let frac = if train_steps > 1 {
                s as f64 / (train_steps - 1) as f64
            } else {
                0.0
            };
            acc *= 1.0 - (b0 + (b1 - b0) * frac);
            acc
        })
        .collect()
}

/// Predicts zero noise, so every DDIM move is a pure rescale.
struct ZeroNoise;

impl NoiseModel for ZeroNoise {
    fn prompt_vector(&self, _: Prompt) -> Tensor {
        Tensor::zeros(&[1])
    }

    fn record(
        &self,
        tape: &mut Tape,
        latents: Var,
        _: usize,
        _: Var,
        _: &mut AttentionHooks<'_>,
    ) -> sketchmotion_core::Result<Var> {
        tape.scale(latents, 0.0)
    }
}

#[test]
fn schedule_matches_oracle() {
    let s = DiffusionSchedule::default();
    let oracle = alpha_bar_oracle(100, 1e-4, 0.02);
    for (a, o) in s.alpha_bar().iter().zip(&oracle) {
        assert!((*a as f64 - o).abs() <= 1e-6, "{a} vs {o}");
    }
    assert_eq!(s.steps(), 25);
    assert_eq!(s.ddim_indices()[0], 0);
    assert_eq!(*s.ddim_indices().last().unwrap(), 99);
    assert_eq!(s.level_alpha_bar(0), 1.0);
}

#[test]
fn step_to_self_is_exact() {
    let s = DiffusionSchedule::default();
    let x = noise::normal(&[2, 4, 4, 1], 3, 0);
    let e = noise::normal(&[2, 4, 4, 1], 3, 1);
    for level in 0..=s.steps() {
        assert_eq!(ddim_step(&s, &x, &e, level, level).unwrap(), x);
    }
}

#[test]
fn down_then_up_round_trips() {
    let s = DiffusionSchedule::default();
    let x = noise::normal(&[3, 5, 5, 1], 4, 0);
    let e = noise::normal(&[3, 5, 5, 1], 4, 1);
    for from in 0..=s.steps() {
        for to in 0..=s.steps() {
            let there = ddim_step(&s, &x, &e, from, to).unwrap();
            let back = ddim_step(&s, &there, &e, to, from).unwrap();
            let err = back.max_abs_diff(&x).unwrap();
            assert!(err <= 1e-5, "{from} -> {to}: {err}");
        }
    }
}

#[test]
fn zero_noise_inversion_is_a_rescale_chain() {
    let s = DiffusionSchedule::default();
    let oracle = alpha_bar_oracle(100, 1e-4, 0.02);
    let x0 = noise::normal(&[1, 6, 6, 1], 5, 0);
    let traj = ddim_invert(&ZeroNoise, &s, &x0).unwrap();
    assert_eq!(traj.len(), s.steps() + 1);
    for (level, x) in traj.iter().enumerate() {
        let ab = if level == 0 {
            1.0
        } else {
            oracle[s.ddim_indices()[level - 1]]
        };
        let expect = x0.map(|v| (v as f64 * ab.sqrt()) as f32);
        let err = x.max_abs_diff(&expect).unwrap();
        assert!(err <= 1e-5, "level {level}: {err}");
    }
    let prompts = vec![Tensor::zeros(&[1]); s.steps()];
    let back = ddim_sample(&ZeroNoise, &s, &traj[s.steps()], &prompts).unwrap();
    assert!(back.max_abs_diff(&x0).unwrap() <= 1e-5);
}

#[test]
fn q_sample_energy_matches_monte_carlo() {
    let s = DiffusionSchedule::default();
    let oracle = alpha_bar_oracle(100, 1e-4, 0.02);
    let x0 = noise::normal(&[4, 4, 4], 7, 0);
    let x0_sq: f64 = x0.data().iter().map(|&v| v as f64 * v as f64).sum();
    for step in [0, 10, 50, 99] {
        let draws = 1000;
        let mean: f64 = (0..draws)
            .map(|d| {
                let e = noise::normal(x0.shape(), 1000 + d, 0);
                q_sample(&s, &x0, step, &e).unwrap().sum_squares() as f64
            })
            .sum::<f64>()
            / draws as f64;
        let ab = oracle[step];
        let expect = ab * x0_sq + (1.0 - ab) * x0.numel() as f64;
        assert!((mean / expect - 1.0).abs() <= 0.05, "step {step}: {mean} vs {expect}");
    }
}

#[test]
fn untrained_inversion_of_blank_latent_stays_finite() {
    let w = DenoiserWeights::init(DenoiserConfig::default(), 11);
    let model = Denoiser::base(&w);
    let s = DiffusionSchedule::default();
    let traj = ddim_invert(&model, &s, &Tensor::zeros(&[1, 16, 16, 1])).unwrap();
    assert_eq!(traj.len(), s.steps() + 1);
    assert!(traj.iter().all(Tensor::is_finite));
}

#[test]
fn inversion_rejects_multi_frame_input() {
    let s = DiffusionSchedule::default();
    assert!(ddim_invert(&ZeroNoise, &s, &Tensor::zeros(&[2, 4, 4, 1])).is_err());
}

#[test]
fn sample_needs_one_prompt_per_step() {
    let s = DiffusionSchedule::default();
    let x = Tensor::zeros(&[1, 2, 2, 1]);
    assert!(ddim_sample(&ZeroNoise, &s, &x, &[Tensor::zeros(&[1])]).is_err());
}

#[test]
fn invalid_schedules_are_rejected() {
    assert!(make_schedule(0, 1e-4, 0.02, 1).is_err());
    assert!(make_schedule(10, 1e-4, 0.02, 11).is_err());
    assert!(make_schedule(10, 0.0, 0.02, 5).is_err());
    assert!(make_schedule(10, 0.03, 0.02, 5).is_err());
    assert!(make_schedule(10, 1e-4, 1.0, 5).is_err());
}

proptest! {
    #[test]
    fn schedule_invariants(train in 1usize..300, frac in 0.0f64..1.0, b1 in 1e-3f64..0.5) {
        let steps = 1 + ((train - 1) as f64 * frac) as usize;
        let s = make_schedule(train, 1e-4, b1, steps).unwrap();
        prop_assert_eq!(s.steps(), steps);
        prop_assert_eq!(*s.ddim_indices().last().unwrap(), train - 1);
        prop_assert!(s.ddim_indices().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.alpha_bar().windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(s.alpha_bar().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn round_trip_any_pair(seed in 0u64..1000, from in 0usize..=25, to in 0usize..=25) {
        let s = DiffusionSchedule::default();
        let x = noise::normal(&[1, 3, 3, 1], seed, 0);
        let e = noise::normal(&[1, 3, 3, 1], seed, 1);
        let back = ddim_step(&s, &ddim_step(&s, &x, &e, from, to).unwrap(), &e, to, from).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() <= 1e-5);
    }

    #[test]
    fn q_sample_is_the_closed_form(seed in 0u64..1000, step in 0usize..100) {
        let s = DiffusionSchedule::default();
        let oracle = alpha_bar_oracle(100, 1e-4, 0.02)[step];
        let x0 = noise::normal(&[4], seed, 0);
        let e = noise::normal(&[4], seed, 1);
        let xt = q_sample(&s, &x0, step, &e).unwrap();
        for ((&v, &a), &b) in xt.data().iter().zip(x0.data()).zip(e.data()) {
            let expect = oracle.sqrt() * a as f64 + (1.0 - oracle).sqrt() * b as f64;
            prop_assert!((v as f64 - expect).abs() <= 1e-5);
        }
    }
}
