//! Noise schedule, deterministic DDIM sampling and inversion, and null
//! embedding refinement.
//!
//! Sampling positions are called *levels*: level 0 is the clean sample
//! (`ᾱ = 1`) and level `l ∈ 1..=T` sits at training step
//! `ddim_indices[l - 1]`. Moving between adjacent levels in either
//! direction evaluates the model at the training step of the higher level.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{GradientRequest, Tape};
use crate::denoiser::{AttentionHooks, NoiseModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::Prompt;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f32>,
    alpha_bar: Vec<f32>,
    ddim_indices: Vec<usize>,
}

/// Linear β ramp over `train_steps` with `steps` evenly spaced sampling
/// indices that include the final training step.
pub fn make_schedule(
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    steps: usize,
) -> Result<DiffusionSchedule> {
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    if train_steps == 0 || steps == 0 || steps > train_steps {
        return Err(Error::Config(format!(
            "need 1 <= steps <= train_steps, got {steps} of {train_steps}"
        )));
    }
    let mut beta = Vec::with_capacity(train_steps);
    let mut alpha_bar = Vec::with_capacity(train_steps);
    let mut acc = 1.0f64;
    for s in 0..train_steps {
        let frac = if train_steps > 1 {
            s as f64 / (train_steps - 1) as f64
        } else {
            0.0
        };
        let b = beta_start + (beta_end - beta_start) * frac;
        acc *= 1.0 - b;
        beta.push(b as f32);
        alpha_bar.push(acc as f32);
    }
    let ddim_indices = if steps == 1 {
        alloc::vec![train_steps - 1]
    } else {
        (0..steps)
            .map(|i| i * (train_steps - 1) / (steps - 1))
            .collect()
    };
    Ok(DiffusionSchedule {
        beta,
        alpha_bar,
        ddim_indices,
    })
}

impl Default for DiffusionSchedule {
    /// 100 training steps, β from 1e-4 to 0.02, 25 sampling steps.
    fn default() -> Self {
        make_schedule(100, 1e-4, 0.02, 25).expect("valid default schedule")
    }
}

impl DiffusionSchedule {
    pub fn train_steps(&self) -> usize {
        self.beta.len()
    }

    /// Number of sampling steps `T`.
    pub fn steps(&self) -> usize {
        self.ddim_indices.len()
    }

    pub fn beta(&self) -> &[f32] {
        &self.beta
    }

    pub fn alpha_bar(&self) -> &[f32] {
        &self.alpha_bar
    }

    pub fn ddim_indices(&self) -> &[usize] {
        &self.ddim_indices
    }

    /// Training step the model sees at `level` (`1..=T`).
    pub fn level_step(&self, level: usize) -> usize {
        self.ddim_indices[level - 1]
    }

    pub fn level_alpha_bar(&self, level: usize) -> f32 {
        if level == 0 {
            1.0
        } else {
            self.alpha_bar[self.ddim_indices[level - 1]]
        }
    }

    /// Coefficients `(a, b)` with `ddim_step(x, ε̂) = a·x + b·ε̂`.
    fn step_coefficients(&self, from: usize, to: usize) -> (f32, f32) {
        let af = self.level_alpha_bar(from) as f64;
        let at = self.level_alpha_bar(to) as f64;
        let a = libm::sqrt(at / af);
        let b = libm::sqrt(1.0 - at) - libm::sqrt(at) * libm::sqrt(1.0 - af) / libm::sqrt(af);
        (a as f32, b as f32)
    }
}

/// `√ᾱ_s·x0 + √(1−ᾱ_s)·ε` at training step `s`.
pub fn q_sample(
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    step: usize,
    eps: &Tensor,
) -> Result<Tensor> {
    let ab = *schedule.alpha_bar.get(step).ok_or(Error::Range {
        value: step,
        lo: 0,
        hi: schedule.train_steps() - 1,
    })?;
    let (a, b) = (libm::sqrtf(ab), libm::sqrtf(1.0 - ab));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Deterministic DDIM move from level `from` to level `to`:
/// `x̂₀ = (x − √(1−ᾱ_from)·ε̂)/√ᾱ_from`, then `√ᾱ_to·x̂₀ + √(1−ᾱ_to)·ε̂`.
pub fn ddim_step(
    schedule: &DiffusionSchedule,
    x: &Tensor,
    eps: &Tensor,
    from: usize,
    to: usize,
) -> Result<Tensor> {
    check_level(schedule, from)?;
    check_level(schedule, to)?;
    if eps.shape() != x.shape() {
        return Err(Error::dim("ddim_step", x.shape(), eps.shape()));
    }
    if from == to {
        return Ok(x.clone());
    }
    let (a, b) = schedule.step_coefficients(from, to);
    x.zip_map(eps, |xv, ev| a * xv + b * ev)
}

fn check_level(schedule: &DiffusionSchedule, level: usize) -> Result<()> {
    if level > schedule.steps() {
        return Err(Error::Range {
            value: level,
            lo: 0,
            hi: schedule.steps(),
        });
    }
    Ok(())
}

/// DDIM inversion of one clean frame `[1, H, W, C]` under the null prompt.
///
/// Returns the pivot trajectory `x_0, x_1, …, x_T` (index = level); the
/// last entry is the reference noise.
pub fn ddim_invert<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    x0: &Tensor,
) -> Result<Vec<Tensor>> {
    if x0.shape().first() != Some(&1) {
        return Err(Error::Shape {
            shape: x0.shape().to_vec(),
            reason: "inversion takes a single frame",
        });
    }
    let null = model.prompt_vector(Prompt::Null);
    let mut traj = Vec::with_capacity(schedule.steps() + 1);
    traj.push(x0.clone());
    for level in 0..schedule.steps() {
        let x = &traj[level];
        let eps = model.predict(
            x,
            schedule.level_step(level + 1),
            &null,
            &mut AttentionHooks::none(),
        )?;
        let next = ddim_step(schedule, x, &eps, level, level + 1)?;
        traj.push(next);
    }
    Ok(traj)
}

/// Run the sampler from level `T` to 0. `prompts[l - 1]` conditions the
/// move out of level `l`.
pub fn ddim_sample<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    x_t: &Tensor,
    prompts: &[Tensor],
) -> Result<Tensor> {
    if prompts.len() != schedule.steps() {
        return Err(Error::Config(format!(
            "need one prompt vector per step ({}), got {}",
            schedule.steps(),
            prompts.len()
        )));
    }
    let mut x = x_t.clone();
    for level in (1..=schedule.steps()).rev() {
        let eps = model.predict(
            &x,
            schedule.level_step(level),
            &prompts[level - 1],
            &mut AttentionHooks::none(),
        )?;
        x = ddim_step(schedule, &x, &eps, level, level - 1)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NullTextRefinement {
    /// Null embedding for each level; entry `l - 1` conditions the move out
    /// of level `l`.
    pub embeddings: Vec<Tensor>,
    /// `‖x̄_{l-1} − x*_{l-1}‖²` after optimizing level `l`, same indexing.
    pub step_mismatch: Vec<f32>,
    /// `‖sample − x0‖∞` with the plain null embedding.
    pub error_before: f32,
    /// `‖sample − x0‖∞` with the returned embeddings.
    pub error_after: f32,
}

/// Per-level optimization of the null embedding so that sampling from the
/// reference noise tracks the inversion trajectory.
///
/// Each level warm-starts from the previous level's embedding and takes up
/// to `iters` descent steps; a step that does not reduce the mismatch is
/// retried with half the step size (at most ten times) and otherwise
/// ends the level. If the refined embeddings do not beat the plain null
/// embedding on the final reconstruction, the plain ones are returned.
pub fn null_text_refine<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    trajectory: &[Tensor],
    iters: usize,
    step_size: f32,
) -> Result<NullTextRefinement> {
    let steps = schedule.steps();
    if trajectory.len() != steps + 1 {
        return Err(Error::Config(format!(
            "trajectory must hold {} states, got {}",
            steps + 1,
            trajectory.len()
        )));
    }
    let x0 = &trajectory[0];
    let null = model.prompt_vector(Prompt::Null);
    let base = alloc::vec![null.clone(); steps];
    let error_before = ddim_sample(model, schedule, &trajectory[steps], &base)?.max_abs_diff(x0)?;

    let mut embeddings = alloc::vec![null.clone(); steps];
    let mut step_mismatch = alloc::vec![0.0; steps];
    let mut x = trajectory[steps].clone();
    let mut current = null;
    for level in (1..=steps).rev() {
        let target = &trajectory[level - 1];
        let (mut loss, mut grad) = mismatch(model, schedule, &x, level, &current, target, true)?;
        for _ in 0..iters {
            let g = grad.take().expect("gradient computed");
            let mut alpha = step_size;
            let mut accepted = false;
            for _ in 0..11 {
                let trial = current.zip_map(&g, |e, gv| e - alpha * gv)?;
                let (l, gr) = mismatch(model, schedule, &x, level, &trial, target, true)?;
                if l.is_finite() && l < loss {
                    current = trial;
                    loss = l;
                    grad = gr;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        let eps = model.predict(
            &x,
            schedule.level_step(level),
            &current,
            &mut AttentionHooks::none(),
        )?;
        x = ddim_step(schedule, &x, &eps, level, level - 1)?;
        step_mismatch[level - 1] = x.sub(target)?.sum_squares();
        embeddings[level - 1] = current.clone();
    }
    let error_after = x.max_abs_diff(x0)?;
    if error_after > error_before {
        let plain = NullTextRefinement {
            step_mismatch: alloc::vec![f32::NAN; steps],
            embeddings: base,
            error_before,
            error_after: error_before,
        };
        return Ok(plain);
    }
    Ok(NullTextRefinement {
        embeddings,
        step_mismatch,
        error_before,
        error_after,
    })
}

/// `‖ddim_step(x, ε̂(x, e)) − target‖²` and optionally its gradient in `e`.
fn mismatch<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    x: &Tensor,
    level: usize,
    embedding: &Tensor,
    target: &Tensor,
    with_grad: bool,
) -> Result<(f32, Option<Tensor>)> {
    let (a, b) = schedule.step_coefficients(level, level - 1);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let ev = tape.leaf(embedding.clone());
    let eps = model.record(
        &mut tape,
        xv,
        schedule.level_step(level),
        ev,
        &mut AttentionHooks::none(),
    )?;
    let scaled_x = tape.leaf(x.scale(a));
    let scaled_eps = tape.scale(eps, b)?;
    let next = tape.add(scaled_x, scaled_eps)?;
    let tv = tape.leaf(target.clone());
    let diff = tape.sub(next, tv)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.sum(sq)?;
    let value = tape.value(loss).data()[0];
    if !with_grad {
        return Ok((value, None));
    }
    let mut g = tape.gradient(&GradientRequest::scalar(loss, alloc::vec![ev]))?;
    Ok((value, g.take(ev)))
}

/// Latent state of a video: frame 0 is the reference slot.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    frames: Tensor,
}

impl LatentVideo {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(Error::Shape {
                shape: frames.shape().to_vec(),
                reason: "video latents are [frames, height, width, channels]",
            });
        }
        Ok(Self { frames })
    }

    /// Reference frame followed by the sampled frames.
    pub fn compose(reference: &Tensor, sampled: Option<&Tensor>) -> Result<Self> {
        match sampled {
            Some(s) => Self::new(Tensor::concat_outer(&[reference, s])?),
            None => Self::new(reference.clone()),
        }
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn reference(&self) -> Tensor {
        self.frames.slice_outer(0, 1).expect("at least one frame")
    }

    /// Frames `1..M`, or `None` for a single-frame video.
    pub fn sampled(&self) -> Option<Tensor> {
        let m = self.len();
        (m > 1).then(|| self.frames.slice_outer(1, m - 1).expect("in range"))
    }
}

/// Every knob of the sampling loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Sampling steps `T`.
    pub steps: usize,
    /// Frame alignment runs while the descending step counter is `>= tau1`.
    pub tau1: usize,
    /// Attention composition runs while the counter is `>= tau2`.
    pub tau2: usize,
    /// Motion–fidelity knob; scales the reference key by `1 + 0.02·λ`.
    pub lambda: f32,
    pub frames: usize,
    pub align_iters: usize,
    pub align_step: f32,
    pub seed: u64,
    /// Drop temporal composition (free morphing).
    pub word_mode: bool,
    pub align: bool,
    pub compose: bool,
    /// Blocks whose spatial site is composed; empty means all.
    pub spatial_blocks: Vec<usize>,
    /// Null-embedding refinement iterations per level (0 disables).
    pub refine_iters: usize,
    pub refine_step: f32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let steps = 25;
        Self {
            steps,
            tau1: 2 * steps / 5,
            tau2: 3 * steps / 5,
            lambda: 1.0,
            frames: 10,
            align_iters: 3,
            align_step: 0.05,
            seed: 0,
            word_mode: false,
            align: true,
            compose: true,
            spatial_blocks: Vec::new(),
            refine_iters: 0,
            refine_step: 0.5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if !(self.tau1 <= self.tau2 && self.tau2 <= self.steps) {
            return Err(Error::Config(format!(
                "need tau1 <= tau2 <= steps, got {} / {} / {}",
                self.tau1, self.tau2, self.steps
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("need at least one frame".into()));
        }
        if !(self.align_step.is_finite() && self.align_step >= 0.0) {
            return Err(Error::Config("align_step must be >= 0".into()));
        }
        if !(self.refine_step.is_finite() && self.refine_step >= 0.0) {
            return Err(Error::Config("refine_step must be >= 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Var;
    use crate::noise;

    #[test]
    fn default_schedule_shape() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.steps(), 25);
        assert_eq!(s.train_steps(), 100);
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar()[99] < s.alpha_bar()[0]);
        assert!(s.alpha_bar()[0] > 0.99 * (1.0 - s.beta()[0]));
        assert!(s.ddim_indices().windows(2).all(|w| w[1] > w[0]));
        assert_eq!(*s.ddim_indices().last().unwrap(), 99);
        assert!(s.beta().iter().all(|&b| b > 0.0 && b < 1.0));
    }

    #[test]
    fn full_ladder_when_steps_equal_train_steps() {
        let s = make_schedule(30, 1e-4, 0.02, 30).unwrap();
        assert_eq!(s.ddim_indices(), (0..30).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn alpha_bar_matches_direct_product() {
        let s = DiffusionSchedule::default();
        for step in 0..100 {
            let mut prod = 1.0f64;
            for u in 0..=step {
                prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * u as f64 / 99.0);
            }
            assert!(
                (s.alpha_bar()[step] as f64 - prod).abs() <= 1e-7,
                "step {step}"
            );
        }
    }

    #[test]
    fn bad_schedules_rejected() {
        assert!(make_schedule(100, 0.0, 0.02, 25).is_err());
        assert!(make_schedule(100, 0.03, 0.02, 25).is_err());
        assert!(make_schedule(100, 1e-4, 1.0, 25).is_err());
        assert!(make_schedule(10, 1e-4, 0.02, 25).is_err());
    }

    #[test]
    fn q_sample_of_zero_is_scaled_noise() {
        let s = DiffusionSchedule::default();
        let eps = noise::normal(&[2, 3], 1, 0);
        let got = q_sample(&s, &Tensor::zeros(&[2, 3]), 40, &eps).unwrap();
        let c = libm::sqrtf(1.0 - s.alpha_bar()[40]);
        assert_eq!(got, eps.map(|e| 0.0 * e + c * e));
    }

    #[test]
    fn q_sample_first_step_is_near_x0() {
        let s = DiffusionSchedule::default();
        let x0 = noise::normal(&[8], 2, 0);
        let got = q_sample(&s, &x0, 0, &Tensor::zeros(&[8])).unwrap();
        let bound = libm::sqrtf(1.0 - s.alpha_bar()[0]);
        assert!(got.max_abs_diff(&x0).unwrap() <= bound * x0.max_abs());
    }

    #[test]
    fn ddim_step_to_self_is_identity() {
        let s = DiffusionSchedule::default();
        let x = noise::normal(&[4, 4], 3, 0);
        let e = noise::normal(&[4, 4], 3, 1);
        assert_eq!(ddim_step(&s, &x, &e, 7, 7).unwrap(), x);
    }

    #[test]
    fn ddim_step_zero_eps_rescales() {
        let s = DiffusionSchedule::default();
        let x = noise::normal(&[6], 4, 0);
        let got = ddim_step(&s, &x, &Tensor::zeros(&[6]), 12, 5).unwrap();
        let r = (s.level_alpha_bar(5) as f64 / s.level_alpha_bar(12) as f64).sqrt();
        for (g, xv) in got.data().iter().zip(x.data()) {
            assert!((*g as f64 - r * *xv as f64).abs() <= 1e-6);
        }
    }

    #[test]
    fn ddim_round_trip() {
        let s = DiffusionSchedule::default();
        let x = noise::normal(&[16], 5, 0);
        let e = noise::normal(&[16], 5, 1);
        let down = ddim_step(&s, &x, &e, 20, 19).unwrap();
        let back = ddim_step(&s, &down, &e, 19, 20).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() <= 1e-5);
    }

    /// `ε̂ = c·x + e` with a prompt vector as large as the frame.
    struct Affine {
        c: f32,
        numel: usize,
    }

    impl NoiseModel for Affine {
        fn prompt_vector(&self, _prompt: Prompt) -> Tensor {
            Tensor::zeros(&[self.numel])
        }

        fn record(
            &self,
            tape: &mut Tape,
            latents: Var,
            _step: usize,
            prompt: Var,
            _hooks: &mut AttentionHooks<'_>,
        ) -> Result<Var> {
            let shape = tape.value(latents).shape().to_vec();
            let p = tape.reshape(prompt, &shape)?;
            let cx = tape.scale(latents, self.c)?;
            tape.add(cx, p)
        }
    }

    #[test]
    fn zero_eps_inversion_is_rescale_chain() {
        let s = DiffusionSchedule::default();
        let model = Affine { c: 0.0, numel: 4 };
        let x0 = noise::normal(&[1, 2, 2, 1], 6, 0);
        let traj = ddim_invert(&model, &s, &x0).unwrap();
        assert_eq!(traj.len(), 26);
        for (level, x) in traj.iter().enumerate() {
            let r = (s.level_alpha_bar(level) as f64).sqrt();
            for (g, xv) in x.data().iter().zip(x0.data()) {
                assert!((*g as f64 - r * *xv as f64).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn inversion_rejects_multi_frame_input() {
        let s = DiffusionSchedule::default();
        let model = Affine { c: 0.0, numel: 4 };
        assert!(matches!(
            ddim_invert(&model, &s, &Tensor::zeros(&[2, 2, 2, 1])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn refinement_with_zero_iterations_keeps_null() {
        let s = DiffusionSchedule::default();
        let model = Affine { c: 0.3, numel: 4 };
        let x0 = noise::normal(&[1, 2, 2, 1], 7, 0);
        let traj = ddim_invert(&model, &s, &x0).unwrap();
        let r = null_text_refine(&model, &s, &traj, 0, 1.0).unwrap();
        assert!(r.embeddings.iter().all(|e| e == &Tensor::zeros(&[4])));
        assert_eq!(r.error_after, r.error_before);
    }

    #[test]
    fn refinement_solves_affine_model_exactly() {
        let s = DiffusionSchedule::default();
        let model = Affine { c: 0.5, numel: 4 };
        let x0 = noise::normal(&[1, 2, 2, 1], 8, 0);
        let traj = ddim_invert(&model, &s, &x0).unwrap();
        let r = null_text_refine(&model, &s, &traj, 200, 2000.0).unwrap();
        assert!(r.error_after <= r.error_before);
        for (l, m) in r.step_mismatch.iter().enumerate() {
            assert!(*m <= 1e-6, "level {} mismatch {m}", l + 1);
        }
    }

    #[test]
    fn sampler_config_defaults_and_validation() {
        let c = SamplerConfig::default();
        assert_eq!((c.steps, c.tau1, c.tau2, c.frames), (25, 10, 15, 10));
        c.validate().unwrap();
        let bad = SamplerConfig {
            tau1: 20,
            ..SamplerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SamplerConfig {
            lambda: -1.0,
            ..SamplerConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
