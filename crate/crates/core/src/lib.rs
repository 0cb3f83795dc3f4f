//! Sketch animation with a small spatio-temporal denoiser.
//!
//! An input sketch is DDIM-inverted to reference noise, the remaining frames
//! start from seeded Gaussian noise, and the joint sampling loop keeps the
//! video anchored to the sketch in two ways: early on the sampled noise is
//! refined so that the reference frame's noise prediction matches the
//! sketch-only prediction, and the pre-softmax scores of spatial and
//! temporal attention are partly replaced by cross scores against the
//! reference frame.
//!
//! The crate is `no_std` (it needs `alloc`). File formats and the command
//! line live in the `sketchmotion` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod noise;
pub mod pipeline;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use autodiff::{GradientRequest, Gradients, Tape, Var};
pub use corpus::{gen_clip, motion_oracle, ClipSample};
pub use denoiser::{
    lora_merge, lora_param_count, AttentionHooks, AttentionKind, AttentionMap, AttentionOverride,
    AttentionTap, Denoiser, DenoiserConfig, DenoiserWeights, LoraAdapter, NoiseModel,
    PromptEmbedding, ScorePlan, Site,
};
pub use diffusion::{
    ddim_invert, ddim_sample, ddim_step, make_schedule, null_text_refine, q_sample,
    DiffusionSchedule, LatentVideo, NullTextRefinement, SamplerConfig,
};
pub use error::{Error, Result};
pub use guidance::{
    align_loss, compose_spatial, compose_temporal, frame_align, n_schedule, AlignConfig,
    AlignState, CompositionPlan,
};
pub use pipeline::{
    animate, eval_identity, eval_motion, extrapolate, postprocess, sampling_schedule,
    AnimationRequest, AnimationResult, Extrapolation, StepDiagnostics,
};
pub use tensor::{matmul, scaled_attention_scores, softmax_rows, Tensor};
pub use training::{train_base, train_lora, LoraConfig, TrainConfig, TrainReport};
pub use vocab::{Motion, Prompt, Shape};
