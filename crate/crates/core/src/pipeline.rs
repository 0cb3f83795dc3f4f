//! Sketch animation: inversion, noise sampling, per-step frame alignment and
//! attention composition, joint denoising, and frame extrapolation.

use alloc::vec::Vec;

use crate::denoiser::{AttentionHooks, AttentionKind, Denoiser, NoiseModel};
use crate::diffusion::{
    ddim_invert, ddim_step, make_schedule, null_text_refine, DiffusionSchedule, LatentVideo,
    SamplerConfig,
};
use crate::error::{Error, Result};
use crate::guidance::{frame_align, n_schedule, AlignConfig, AlignState, CompositionPlan};
use crate::noise;
use crate::tensor::Tensor;
use crate::vocab::Prompt;

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct AnimationRequest {
    /// Input sketch, `[H, W, C]` or `[1, H, W, C]`, values in `[-1, 1]`.
    pub sketch: Tensor,
    pub prompt: Prompt,
    pub config: SamplerConfig,
}

/// What happened at one sampling level.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    /// Descending counter `t` (`T..=1`).
    pub level: usize,
    /// Training step the model was evaluated at.
    pub step: usize,
    /// Accepted alignment losses; empty when alignment did not run.
    pub align_losses: Vec<f32>,
    /// Reference repetitions `N` when composition ran.
    pub n: Option<usize>,
    pub spatial_composed: bool,
    pub temporal_composed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnimationResult {
    /// Raw `[M, H, W, C]` frames; frame 0 is the reconstructed reference.
    pub frames: Tensor,
    pub steps: Vec<StepDiagnostics>,
    pub seed: u64,
    pub config: SamplerConfig,
    /// Reconstruction error of the plain inversion, `‖·‖∞`.
    pub inversion_error: f32,
    /// Reconstruction error after null-embedding refinement, when enabled.
    pub refined_error: Option<f32>,
}

/// Schedule used by [`animate`] for a model with `train_steps` rows.
pub fn sampling_schedule(train_steps: usize, steps: usize) -> Result<DiffusionSchedule> {
    make_schedule(train_steps, BETA_START, BETA_END, steps)
}

fn sketch_frame(sketch: &Tensor, frame_shape: [usize; 3]) -> Result<Tensor> {
    let s = sketch.shape();
    let ok = s == frame_shape || (s.len() == 4 && s[0] == 1 && s[1..] == frame_shape);
    if !ok {
        return Err(Error::Shape {
            shape: s.to_vec(),
            reason: "sketch must be a single [height, width, channels] frame",
        });
    }
    if !sketch.data().iter().all(|v| (-1.0..=1.0).contains(v)) {
        return Err(Error::Config("sketch values must lie in [-1, 1]".into()));
    }
    let [h, w, c] = frame_shape;
    sketch.reshape(&[1, h, w, c])
}

/// Animate a sketch.
///
/// The sketch is inverted to reference noise `x^r_T`; frames `2..M` start
/// from unit normal noise drawn per frame from `(seed, frame index)`. At
/// each level `t` from `T` down to 1: if `t ≥ τ₁` the sampled frames are
/// aligned; if `t ≥ τ₂` a reference pass over `N` copies of the reference
/// frame under the null prompt supplies queries and keys for the composed
/// joint pass; otherwise the joint pass runs plain. All frames then take one
/// DDIM step together.
pub fn animate(model: &Denoiser<'_>, req: &AnimationRequest) -> Result<AnimationResult> {
    let cfg = &req.config;
    cfg.validate()?;
    let mcfg = model.config();
    if cfg.frames > mcfg.max_frames {
        return Err(Error::Range {
            value: cfg.frames,
            lo: 1,
            hi: mcfg.max_frames,
        });
    }
    let schedule = sampling_schedule(mcfg.train_steps, cfg.steps)?;
    let sketch = sketch_frame(&req.sketch, mcfg.frame_shape())?;

    let trajectory = ddim_invert(model, &schedule, &sketch)?;
    let null = model.embed_prompt(Prompt::Null).vector;
    let (null_by_level, inversion_error, refined_error) = if cfg.refine_iters > 0 {
        let r = null_text_refine(
            model,
            &schedule,
            &trajectory,
            cfg.refine_iters,
            cfg.refine_step,
        )?;
        (r.embeddings, r.error_before, Some(r.error_after))
    } else {
        let plain = alloc::vec![null.clone(); cfg.steps];
        let recon =
            crate::diffusion::ddim_sample(model, &schedule, &trajectory[cfg.steps], &plain)?;
        (plain, recon.max_abs_diff(&sketch)?, None)
    };
    let input = model.embed_prompt(req.prompt).vector;

    let reference = trajectory[cfg.steps].clone();
    let sampled = (cfg.frames > 1)
        .then(|| noise::normal_frames(cfg.frames - 1, &mcfg.frame_shape(), cfg.seed, 1));
    let mut video = LatentVideo::compose(&reference, sampled.as_ref())?;

    let align_cfg = AlignConfig {
        iters: cfg.align_iters,
        step: cfg.align_step,
    };
    let mut steps = Vec::with_capacity(cfg.steps);
    for level in (1..=cfg.steps).rev() {
        let step = schedule.level_step(level);
        let null_t = &null_by_level[level - 1];
        let mut diag = StepDiagnostics {
            level,
            step,
            align_losses: Vec::new(),
            n: None,
            spatial_composed: false,
            temporal_composed: false,
        };

        if cfg.align && level >= cfg.tau1 && video.len() > 1 {
            let x_r = video.reference();
            let state = AlignState {
                f_train: video.sampled(),
                losses: Vec::new(),
            };
            let aligned = frame_align(model, &x_r, state, step, &input, null_t, align_cfg)?;
            diag.align_losses = aligned.losses;
            video = LatentVideo::compose(&x_r, aligned.f_train.as_ref())?;
        }

        let eta = if cfg.compose && level >= cfg.tau2 {
            let n = n_schedule(level, cfg.steps, cfg.tau2, cfg.frames)?;
            let x_r = video.reference();
            let mut ref_hooks = AttentionHooks::capturing();
            model.predict(&x_r.tile_outer(n)?, step, null_t, &mut ref_hooks)?;
            let plan = CompositionPlan {
                n,
                lambda: cfg.lambda,
                spatial_enabled: true,
                temporal_enabled: !cfg.word_mode,
                spatial_blocks: cfg.spatial_blocks.clone(),
                reference_taps: ref_hooks.taps,
            };
            plan.validate(cfg.frames)?;
            let overrides = plan.overrides()?;
            diag.n = Some(n);
            diag.spatial_composed = overrides
                .iter()
                .any(|o| o.site.kind == AttentionKind::Spatial);
            diag.temporal_composed = overrides
                .iter()
                .any(|o| o.site.kind == AttentionKind::Temporal);
            model.predict(
                video.frames(),
                step,
                &input,
                &mut AttentionHooks::with_overrides(&overrides),
            )?
        } else {
            model.predict(video.frames(), step, &input, &mut AttentionHooks::none())?
        };

        let next = ddim_step(&schedule, video.frames(), &eta, level, level - 1)?;
        if !next.is_finite() {
            return Err(Error::NonFinite { step: level });
        }
        video = LatentVideo::new(next)?;
        steps.push(diag);
    }

    Ok(AnimationResult {
        frames: video.into_frames(),
        steps,
        seed: cfg.seed,
        config: cfg.clone(),
        inversion_error,
        refined_error,
    })
}

/// Threshold at zero: `v >= 0` becomes white (`+1`), everything else black.
pub fn postprocess(frames: &Tensor) -> Tensor {
    frames.map(|v| if v >= 0.0 { 1.0 } else { -1.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extrapolation {
    /// Post-processed frames, `M + (K−1)·(M−1)` of them.
    pub frames: Tensor,
    /// Input sketch of each segment (segment `k > 0` gets the binarized
    /// final frame of segment `k − 1`).
    pub sketches: Vec<Tensor>,
    pub segments: Vec<AnimationResult>,
}

/// Chain one animation per prompt. Segment `k` runs with seed `seed + k`;
/// each later segment drops its frame 0 so the junction frame appears once,
/// as the previous segment's binarized final frame.
pub fn extrapolate(
    model: &Denoiser<'_>,
    sketch: &Tensor,
    prompts: &[Prompt],
    config: &SamplerConfig,
) -> Result<Extrapolation> {
    if prompts.is_empty() {
        return Err(Error::Config(
            "extrapolation needs at least one prompt".into(),
        ));
    }
    let frame_shape = model.config().frame_shape();
    let mut current = sketch_frame(sketch, frame_shape)?;
    let mut parts: Vec<Tensor> = Vec::new();
    let mut sketches = Vec::with_capacity(prompts.len());
    let mut segments = Vec::with_capacity(prompts.len());
    for (k, &prompt) in prompts.iter().enumerate() {
        let mut cfg = config.clone();
        cfg.seed = config.seed.wrapping_add(k as u64);
        let req = AnimationRequest {
            sketch: current.clone(),
            prompt,
            config: cfg,
        };
        let result = animate(model, &req)?;
        let binary = postprocess(&result.frames);
        let m = binary.shape()[0];
        if k == 0 {
            parts.push(binary.clone());
        } else if m > 1 {
            parts.push(binary.slice_outer(1, m - 1)?);
        }
        sketches.push(current);
        current = binary.slice_outer(m - 1, 1)?;
        segments.push(result);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Extrapolation {
        frames: Tensor::concat_outer(&refs)?,
        sketches,
        segments,
    })
}

/// Mean over frames of the black-pixel IoU against the sketch; a frame and
/// sketch that are both blank score 1.
pub fn eval_identity(frames: &Tensor, sketch: &Tensor) -> Result<f32> {
    let per = sketch.numel();
    if frames.rank() < 2
        || frames.numel() % per != 0
        || frames.numel() == 0
        || frames.shape()[1..].iter().product::<usize>() != per
    {
        return Err(Error::dim("eval_identity", frames.shape(), sketch.shape()));
    }
    let m = frames.numel() / per;
    let mut total = 0.0f64;
    for f in frames.data().chunks(per) {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in f.iter().zip(sketch.data()) {
            let (ba, bb) = (a < 0.0, b < 0.0);
            inter += (ba && bb) as usize;
            union += (ba || bb) as usize;
        }
        total += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    Ok((total / m as f64) as f32)
}

/// Mean absolute difference between consecutive frames.
pub fn eval_motion(frames: &Tensor) -> Result<f32> {
    if frames.rank() < 2 || frames.shape()[0] < 2 {
        return Err(Error::Shape {
            shape: frames.shape().to_vec(),
            reason: "motion needs at least two frames",
        });
    }
    let m = frames.shape()[0];
    let per = frames.numel() / m;
    let d = frames.data();
    let mut total = 0.0f64;
    for i in 1..m {
        for j in 0..per {
            total += (d[i * per + j] - d[(i - 1) * per + j]).abs() as f64;
        }
    }
    Ok((total / ((m - 1) * per) as f64) as f32)
}
