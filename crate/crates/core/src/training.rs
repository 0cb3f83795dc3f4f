//! Base-model training and LoRA fine-tuning on the denoising objective
//! `E‖ε − ε̂(√ᾱ_s·x0 + √(1−ᾱ_s)·ε, s, P)‖²`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{GradientRequest, Tape, Var};
use crate::corpus::ClipSample;
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserWeights, LoraAdapter};
use crate::diffusion::{q_sample, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::noise;
use crate::tensor::Tensor;
use crate::vocab::Prompt;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: DenoiserConfig,
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
    /// Gradient-norm ceiling applied to each averaged batch gradient.
    pub clip_norm: f32,
    /// Probability of training a draw with the null prompt.
    pub null_prob: f32,
    /// Fixed draws used for the initial and final loss.
    pub probe: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: DenoiserConfig::default(),
            epochs: 6,
            lr: 0.05,
            batch: 8,
            seed: 0,
            clip_norm: 1.0,
            null_prob: 0.2,
            probe: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    /// Optimizer updates.
    pub iters: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
    pub clip_norm: f32,
    pub probe: usize,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            iters: 2500,
            lr: 0.01,
            batch: 8,
            seed: 0,
            clip_norm: 1.0,
            probe: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of each epoch (LoRA: of each block of updates).
    pub epoch_losses: Vec<f32>,
    /// Probe loss before the first update.
    pub initial_loss: f32,
    /// Probe loss after the last update.
    pub final_loss: f32,
    pub updates: usize,
    pub checkpoint_id: String,
}

/// One noised training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    /// `[m, H, W, C]` noised frames.
    pub x_t: Tensor,
    pub eps: Tensor,
    pub step: usize,
    pub prompt: Prompt,
}

/// Noise a frame prefix of `clip` at `step`.
pub fn make_draw(
    schedule: &DiffusionSchedule,
    clip: &ClipSample,
    frames: usize,
    step: usize,
    prompt: Prompt,
    seed: u64,
    stream: u64,
) -> Result<Draw> {
    let x0 = clip.frames.slice_outer(0, frames)?;
    let eps = noise::normal(x0.shape(), seed, stream);
    let x_t = q_sample(schedule, &x0, step, &eps)?;
    Ok(Draw {
        x_t,
        eps,
        step,
        prompt,
    })
}

/// Deterministic full-length draws over `clips`, cycling through them.
pub fn probe_draws(
    schedule: &DiffusionSchedule,
    clips: &[ClipSample],
    count: usize,
    seed: u64,
) -> Result<Vec<Draw>> {
    if clips.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let mut rng = noise::stream(seed, PROBE_STREAM);
    (0..count)
        .map(|i| {
            let clip = &clips[i % clips.len()];
            let step = rng.gen_range(0..schedule.train_steps());
            let prompt = Prompt::new(clip.shape, clip.motion);
            make_draw(
                schedule,
                clip,
                clip.frames.shape()[0],
                step,
                prompt,
                seed,
                PROBE_STREAM + 1 + i as u64,
            )
        })
        .collect()
}

const PROBE_STREAM: u64 = 1 << 40;

/// Mean per-element squared error of the model over `draws`.
pub fn eval_loss(model: &Denoiser<'_>, draws: &[Draw]) -> Result<f32> {
    let mut total = 0.0f64;
    for d in draws {
        let p = model.embed_prompt(d.prompt);
        let eps_hat = model.predict_noise(
            &d.x_t,
            d.step,
            &p,
            &mut crate::denoiser::AttentionHooks::none(),
        )?;
        total += (eps_hat.sub(&d.eps)?.sum_squares() / d.eps.numel() as f32) as f64;
    }
    Ok((total / draws.len().max(1) as f64) as f32)
}

/// Loss of one draw and its gradient with respect to `wrt(params)`.
fn draw_gradient(model: &Denoiser<'_>, draw: &Draw, lora: bool) -> Result<(f32, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = model.insert_params(&mut tape)?;
    let x = tape.leaf(draw.x_t.clone());
    let p = model.prompt_var(&mut tape, &params, draw.prompt)?;
    let out = model.forward(
        &mut tape,
        &params,
        x,
        draw.step,
        p,
        &mut crate::denoiser::AttentionHooks::none(),
    )?;
    let target = tape.leaf(draw.eps.clone());
    let diff = tape.sub(out, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    let loss = tape.scale(total, 1.0 / draw.eps.numel() as f32)?;
    let wrt: Vec<Var> = if lora {
        params.lora.iter().flat_map(|&(a, b)| [a, b]).collect()
    } else {
        params.base.clone()
    };
    let mut g = tape.gradient(&GradientRequest::scalar(loss, wrt.clone()))?;
    let grads = wrt
        .iter()
        .map(|&v| g.take(v).expect("requested slot"))
        .collect();
    Ok((tape.value(loss).data()[0], grads))
}

/// Average `grads` over `count`, rescale to at most `clip` in global norm.
fn finish_gradient(grads: &mut [Tensor], count: usize, clip: f32) {
    let inv = 1.0 / count as f32;
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    let norm = libm::sqrtf(grads.iter().map(Tensor::sum_squares).sum::<f32>());
    if norm > clip {
        let s = clip / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn accumulate(acc: &mut Option<Vec<Tensor>>, grads: Vec<Tensor>) -> Result<()> {
    match acc {
        None => *acc = Some(grads),
        Some(a) => {
            for (x, g) in a.iter_mut().zip(grads) {
                *x = x.add(&g)?;
            }
        }
    }
    Ok(())
}

/// Train a freshly initialized denoiser with plain clipped gradient descent.
///
/// Each draw takes a random frame prefix (1 to all frames), a random
/// training step, fresh noise, and the clip's prompt or, with probability
/// `null_prob`, the null prompt.
pub fn train_base(
    schedule: &DiffusionSchedule,
    dataset: &[ClipSample],
    config: &TrainConfig,
) -> Result<(DenoiserWeights, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    if config.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    if schedule.train_steps() != config.model.train_steps {
        return Err(Error::Config(format!(
            "schedule has {} training steps, model table has {}",
            schedule.train_steps(),
            config.model.train_steps
        )));
    }
    let mut weights = DenoiserWeights::init(config.model, config.seed);
    let probe = probe_draws(schedule, dataset, config.probe, config.seed)?;
    let initial_loss = eval_loss(&Denoiser::base(&weights), &probe)?;

    let mut rng = noise::stream(config.seed, TRAIN_STREAM);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut updates = 0;
    let mut counter = 0u64;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0f64;
        for chunk in order.chunks(config.batch) {
            let mut acc = None;
            let mut batch_loss = 0.0f32;
            for &i in chunk {
                let clip = &dataset[i];
                let m = clip.frames.shape()[0].min(config.model.max_frames);
                let frames = rng.gen_range(1..=m);
                let step = rng.gen_range(0..schedule.train_steps());
                let prompt = if rng.gen::<f32>() < config.null_prob {
                    Prompt::Null
                } else {
                    Prompt::new(clip.shape, clip.motion)
                };
                let draw = make_draw(schedule, clip, frames, step, prompt, config.seed, counter)?;
                counter += 1;
                let (loss, grads) = draw_gradient(&Denoiser::base(&weights), &draw, false)?;
                batch_loss += loss;
                accumulate(&mut acc, grads)?;
            }
            batch_loss /= chunk.len() as f32;
            if !batch_loss.is_finite() || batch_loss > 10.0 * initial_loss {
                return Err(Error::Diverged {
                    update: updates,
                    loss: batch_loss,
                    initial: initial_loss,
                });
            }
            epoch_total += (batch_loss * chunk.len() as f32) as f64;
            let mut grads = acc.expect("non-empty batch");
            finish_gradient(&mut grads, chunk.len(), config.clip_norm);
            for ((_, w), g) in weights.params_mut().iter_mut().zip(&grads) {
                for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
                    *wv -= config.lr * gv;
                }
            }
            updates += 1;
        }
        epoch_losses.push((epoch_total / dataset.len() as f64) as f32);
    }
    let final_loss = eval_loss(&Denoiser::base(&weights), &probe)?;
    let checkpoint_id = content_id(weights.named());
    Ok((
        weights,
        TrainReport {
            epoch_losses,
            initial_loss,
            final_loss,
            updates,
            checkpoint_id,
        },
    ))
}

const TRAIN_STREAM: u64 = 1 << 41;
const LORA_STREAM: u64 = 1 << 42;

/// Fit rank-`r` adapters on every attention projection of a frozen base.
///
/// Draws always use full clips and the clip's own prompt. The report's
/// initial and final losses are over the same fixed probe draws of
/// `dataset`; `epoch_losses` holds the mean training loss of each block of
/// `dataset.len()` draws.
pub fn train_lora(
    schedule: &DiffusionSchedule,
    base: &DenoiserWeights,
    dataset: &[ClipSample],
    config: &LoraConfig,
) -> Result<(Vec<LoraAdapter>, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    if config.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let cfg = base.config();
    let mut adapters = cfg
        .attention_projections()
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            LoraAdapter::init(
                name,
                cfg.width,
                cfg.width,
                config.rank,
                config.seed,
                LORA_STREAM + i as u64,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let probe = probe_draws(schedule, dataset, config.probe, config.seed)?;
    let initial_loss = eval_loss(&Denoiser::new(base, &adapters)?, &probe)?;

    let mut rng = noise::stream(config.seed, TRAIN_STREAM + 1);
    let mut epoch_losses = Vec::new();
    let (mut block_total, mut block_count) = (0.0f64, 0usize);
    let mut counter = 0u64;
    for update in 0..config.iters {
        let mut acc = None;
        let mut batch_loss = 0.0f32;
        for _ in 0..config.batch {
            let clip = &dataset[rng.gen_range(0..dataset.len())];
            let step = rng.gen_range(0..schedule.train_steps());
            let m = clip.frames.shape()[0].min(cfg.max_frames);
            let prompt = Prompt::new(clip.shape, clip.motion);
            let draw = make_draw(
                schedule,
                clip,
                m,
                step,
                prompt,
                config.seed ^ LORA_STREAM,
                counter,
            )?;
            counter += 1;
            let (loss, grads) = draw_gradient(&Denoiser::new(base, &adapters)?, &draw, true)?;
            batch_loss += loss;
            accumulate(&mut acc, grads)?;
        }
        batch_loss /= config.batch as f32;
        if !batch_loss.is_finite() || batch_loss > 10.0 * initial_loss {
            return Err(Error::Diverged {
                update,
                loss: batch_loss,
                initial: initial_loss,
            });
        }
        let mut grads = acc.expect("non-empty batch");
        finish_gradient(&mut grads, config.batch, config.clip_norm);
        for (ad, g) in adapters.iter_mut().zip(grads.chunks(2)) {
            let a = ad.a().zip_map(&g[0], |w, gv| w - config.lr * gv)?;
            let b = ad.b().zip_map(&g[1], |w, gv| w - config.lr * gv)?;
            ad.set_factors(a, b);
        }
        block_total += (batch_loss * config.batch as f32) as f64;
        block_count += config.batch;
        if block_count >= dataset.len() {
            epoch_losses.push((block_total / block_count as f64) as f32);
            (block_total, block_count) = (0.0, 0);
        }
    }
    if block_count > 0 {
        epoch_losses.push((block_total / block_count as f64) as f32);
    }
    let final_loss = eval_loss(&Denoiser::new(base, &adapters)?, &probe)?;
    let named: Vec<(String, Tensor)> = adapters
        .iter()
        .flat_map(|ad| {
            [
                (format!("{}.lora_a", ad.target()), ad.a().clone()),
                (format!("{}.lora_b", ad.target()), ad.b().clone()),
            ]
        })
        .collect();
    Ok((
        adapters,
        TrainReport {
            epoch_losses,
            initial_loss,
            final_loss,
            updates: config.iters,
            checkpoint_id: content_id(&named),
        },
    ))
}

/// SHA-256 over names, extents and little-endian payloads, as hex.
pub fn content_id(named: &[(String, Tensor)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in named {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.rank() as u64).to_le_bytes());
        for &e in t.shape() {
            h.update((e as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    let mut out = String::with_capacity(64);
    for b in h.finalize() {
        let _ = write!(out, "{b:02x}");
    }
    out
}
