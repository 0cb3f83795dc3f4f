//! The noise-prediction network.
//!
//! Pixels are tokens. After the input projection every token receives a
//! position embedding, the timestep and prompt embeddings, and its frame's
//! index embedding. Each block then applies, with pre-normalization and
//! residual connections:
//!
//! 1. spatial self-attention over the `H·W` tokens of each frame (frames are
//!    the batch),
//! 2. temporal self-attention over the `M` frames at each token position,
//! 3. a two-layer SiLU MLP.
//!
//! Every attention site can be tapped for its `(q, k)` pair and can have its
//! pre-softmax scores rewritten by an [`AttentionOverride`].

mod attention;
mod lora;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

pub use attention::{
    AttentionHooks, AttentionKind, AttentionMap, AttentionOverride, AttentionTap, ScorePlan, Site,
};
pub use lora::{lora_merge, lora_param_count, LoraAdapter};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::noise;
use crate::tensor::Tensor;
use crate::vocab::{Prompt, VOCAB_SIZE};

const LN_EPS: f32 = 1e-5;
const PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Model width `D`.
    pub width: usize,
    pub channels: usize,
    pub height: usize,
    pub frame_width: usize,
    pub blocks: usize,
    /// Rows of the timestep embedding table.
    pub train_steps: usize,
    /// Rows of the frame-index embedding table.
    pub max_frames: usize,
    pub vocab: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 32,
            channels: 1,
            height: 16,
            frame_width: 16,
            blocks: 2,
            train_steps: 100,
            max_frames: 16,
            vocab: VOCAB_SIZE,
        }
    }
}

impl DenoiserConfig {
    pub fn tokens(&self) -> usize {
        self.height * self.frame_width
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.height, self.frame_width, self.channels]
    }

    /// Names and shapes of every base tensor, in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, c) = (self.width, self.channels);
        let mut out = vec![
            ("embed.in".to_string(), vec![c, d]),
            ("embed.in_bias".to_string(), vec![d]),
            ("embed.pos".to_string(), vec![self.tokens(), d]),
            ("embed.frame".to_string(), vec![self.max_frames, d]),
            ("embed.time".to_string(), vec![self.train_steps, d]),
            ("embed.prompt".to_string(), vec![self.vocab, d]),
        ];
        for b in 0..self.blocks {
            for kind in ["spatial", "temporal"] {
                for p in PROJECTIONS {
                    out.push((format!("blocks.{b}.{kind}.{p}"), vec![d, d]));
                }
            }
            out.push((format!("blocks.{b}.mlp.up"), vec![d, 4 * d]));
            out.push((format!("blocks.{b}.mlp.up_bias"), vec![4 * d]));
            out.push((format!("blocks.{b}.mlp.down"), vec![4 * d, d]));
            out.push((format!("blocks.{b}.mlp.down_bias"), vec![d]));
        }
        out.push(("head.out".to_string(), vec![d, c]));
        out.push(("head.out_bias".to_string(), vec![c]));
        out
    }

    /// Names of the attention projection matrices (LoRA targets).
    pub fn attention_projections(&self) -> Vec<String> {
        let mut out = Vec::new();
        for b in 0..self.blocks {
            for kind in ["spatial", "temporal"] {
                for p in PROJECTIONS {
                    out.push(format!("blocks.{b}.{kind}.{p}"));
                }
            }
        }
        out
    }

    /// Recover the configuration from named tensor shapes.
    pub fn infer(named: &[(String, Tensor)]) -> Result<Self> {
        let shape = |name: &str| -> Result<&[usize]> {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.shape())
                .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))
        };
        let embed_in = shape("embed.in")?;
        let pos = shape("embed.pos")?;
        let side = libm::sqrt(pos[0] as f64) as usize;
        if side * side != pos[0] {
            return Err(Error::Config("position table is not a square frame".into()));
        }
        let blocks = named
            .iter()
            .filter(|(n, _)| n.starts_with("blocks.") && n.ends_with(".mlp.up"))
            .count();
        let cfg = Self {
            width: embed_in[1],
            channels: embed_in[0],
            height: side,
            frame_width: side,
            blocks,
            train_steps: shape("embed.time")?[0],
            max_frames: shape("embed.frame")?[0],
            vocab: shape("embed.prompt")?[0],
        };
        Ok(cfg)
    }
}

/// All base tensors of the network, in [`DenoiserConfig::param_shapes`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights {
    config: DenoiserConfig,
    params: Vec<(String, Tensor)>,
}

impl DenoiserWeights {
    pub fn init(config: DenoiserConfig, seed: u64) -> Self {
        let d = config.width as f32;
        let params = config
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let stream = i as u64;
                let t = match name.as_str() {
                    "embed.in" => noise::normal(&shape, seed, stream),
                    "embed.pos" => {
                        sinusoid_2d(config.height, config.frame_width, config.width, 0.5)
                    }
                    "embed.time" => sinusoid_1d(config.train_steps, config.width, 0.5),
                    "embed.prompt" => noise::normal(&shape, seed, stream).scale(0.3),
                    "head.out" => noise::normal(&shape, seed, stream).scale(0.25 / libm::sqrtf(d)),
                    n if n.ends_with("bias") || n == "embed.frame" => Tensor::zeros(&shape),
                    n if n.ends_with(".o") => {
                        noise::normal(&shape, seed, stream).scale(0.5 / libm::sqrtf(d))
                    }
                    n if n.ends_with("mlp.down") => {
                        noise::normal(&shape, seed, stream).scale(0.5 / libm::sqrtf(4.0 * d))
                    }
                    _ => noise::normal(&shape, seed, stream).scale(1.0 / libm::sqrtf(d)),
                };
                (name, t)
            })
            .collect();
        Self { config, params }
    }

    /// Build from named tensors; names and shapes must match the config
    /// inferred from them.
    pub fn from_named(named: Vec<(String, Tensor)>) -> Result<Self> {
        let config = DenoiserConfig::infer(&named)?;
        let expected = config.param_shapes();
        let mut params = Vec::with_capacity(expected.len());
        for (name, shape) in expected {
            let t = named
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("from_named", &shape, t.shape()));
            }
            if !t.is_finite() {
                return Err(Error::Config(format!("tensor `{name}` is not finite")));
            }
            params.push((name, t));
        }
        if params.len() != named.len() {
            return Err(Error::Config("unexpected extra tensors".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn named(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub(crate) fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    /// Prompt conditioning vector: the null row, or the sum of the shape
    /// and motion rows.
    pub fn embed_prompt(&self, prompt: Prompt) -> PromptEmbedding {
        let table = self.get("embed.prompt").expect("prompt table");
        let d = self.config.width;
        let mut vector = Tensor::zeros(&[d]);
        for tok in prompt.tokens() {
            for (v, &w) in vector
                .data_mut()
                .iter_mut()
                .zip(&table.data()[tok * d..(tok + 1) * d])
            {
                *v += w;
            }
        }
        PromptEmbedding { prompt, vector }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub prompt: Prompt,
    pub vector: Tensor,
}

fn sinusoid_1d(rows: usize, d: usize, amp: f32) -> Tensor {
    let half = d / 2;
    Tensor::from_fn(&[rows, d], |i| {
        let (r, j) = (i / d, i % d);
        let f = libm::powf(1000.0, -((j % half) as f32) / half as f32);
        let a = r as f32 * f;
        amp * if j < half {
            libm::sinf(a)
        } else {
            libm::cosf(a)
        }
    })
}

fn sinusoid_2d(h: usize, w: usize, d: usize, amp: f32) -> Tensor {
    let quarter = d / 4;
    Tensor::from_fn(&[h * w, d], |i| {
        let (tok, j) = (i / d, i % d);
        let coord = if j < d / 2 { tok / w } else { tok % w } as f32;
        let f = libm::powf(32.0, -((j % quarter) as f32) / quarter as f32);
        let a = coord * f;
        amp * if (j / quarter) % 2 == 0 {
            libm::sinf(a)
        } else {
            libm::cosf(a)
        }
    })
}

/// A predictor `ε̂(x_t, t, prompt)` recordable on a [`Tape`].
///
/// The prompt enters as a plain vector so that it can be optimized
/// directly, as null-embedding refinement does.
pub trait NoiseModel {
    fn prompt_vector(&self, prompt: Prompt) -> Tensor;

    fn record(
        &self,
        tape: &mut Tape,
        latents: Var,
        step: usize,
        prompt: Var,
        hooks: &mut AttentionHooks<'_>,
    ) -> Result<Var>;

    fn predict(
        &self,
        latents: &Tensor,
        step: usize,
        prompt: &Tensor,
        hooks: &mut AttentionHooks<'_>,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(latents.clone());
        let p = tape.leaf(prompt.clone());
        let out = self.record(&mut tape, x, step, p, hooks)?;
        Ok(tape.value(out).clone())
    }
}

/// Network weights plus an optional set of LoRA adapters.
#[derive(Debug, Clone, Copy)]
pub struct Denoiser<'a> {
    weights: &'a DenoiserWeights,
    adapters: &'a [LoraAdapter],
}

/// Tape handles for one forward pass.
#[derive(Debug)]
pub(crate) struct Params {
    effective: BTreeMap<String, Var>,
    pub(crate) base: Vec<Var>,
    pub(crate) lora: Vec<(Var, Var)>,
}

impl Params {
    fn get(&self, name: &str) -> Var {
        self.effective[name]
    }
}

impl<'a> Denoiser<'a> {
    pub fn new(weights: &'a DenoiserWeights, adapters: &'a [LoraAdapter]) -> Result<Self> {
        for ad in adapters {
            let w0 = weights.get(ad.target()).ok_or_else(|| {
                Error::Config(format!("adapter targets unknown tensor `{}`", ad.target()))
            })?;
            if w0.shape() != [ad.a().shape()[0], ad.b().shape()[1]] {
                return Err(Error::dim(
                    "adapter",
                    w0.shape(),
                    &[ad.a().shape()[0], ad.b().shape()[1]],
                ));
            }
        }
        Ok(Self { weights, adapters })
    }

    pub fn base(weights: &'a DenoiserWeights) -> Self {
        Self {
            weights,
            adapters: &[],
        }
    }

    pub fn weights(&self) -> &'a DenoiserWeights {
        self.weights
    }

    pub fn adapters(&self) -> &'a [LoraAdapter] {
        self.adapters
    }

    pub fn config(&self) -> &'a DenoiserConfig {
        &self.weights.config
    }

    pub fn embed_prompt(&self, prompt: Prompt) -> PromptEmbedding {
        self.weights.embed_prompt(prompt)
    }

    /// `ε̂` for every frame of `latents` (`[M, H, W, C]`).
    pub fn predict_noise(
        &self,
        latents: &Tensor,
        step: usize,
        prompt: &PromptEmbedding,
        hooks: &mut AttentionHooks<'_>,
    ) -> Result<Tensor> {
        self.predict(latents, step, &prompt.vector, hooks)
    }

    pub(crate) fn insert_params(&self, tape: &mut Tape) -> Result<Params> {
        let mut effective = BTreeMap::new();
        let mut base = Vec::with_capacity(self.weights.params.len());
        for (name, t) in &self.weights.params {
            let v = tape.leaf(t.clone());
            base.push(v);
            effective.insert(name.clone(), v);
        }
        let mut lora = Vec::with_capacity(self.adapters.len());
        for ad in self.adapters {
            let a = tape.leaf(ad.a().clone());
            let b = tape.leaf(ad.b().clone());
            let delta = tape.matmul(a, b)?;
            let w = effective[ad.target()];
            let merged = tape.add(w, delta)?;
            effective.insert(ad.target().to_string(), merged);
            lora.push((a, b));
        }
        Ok(Params {
            effective,
            base,
            lora,
        })
    }

    /// Prompt vector recorded from the embedding table, so that training
    /// reaches the table rows.
    pub(crate) fn prompt_var(&self, tape: &mut Tape, p: &Params, prompt: Prompt) -> Result<Var> {
        let table = p.get("embed.prompt");
        let tokens = prompt.tokens();
        let mut acc = tape.row(table, tokens[0])?;
        for &tok in &tokens[1..] {
            let r = tape.row(table, tok)?;
            acc = tape.add(acc, r)?;
        }
        Ok(acc)
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        p: &Params,
        latents: Var,
        step: usize,
        prompt: Var,
        hooks: &mut AttentionHooks<'_>,
    ) -> Result<Var> {
        let cfg = &self.weights.config;
        let shape = tape.value(latents).shape().to_vec();
        let m = match shape[..] {
            [m, h, w, c] if [h, w, c] == cfg.frame_shape() => m,
            _ => {
                return Err(Error::Shape {
                    shape,
                    reason: "latents must be [frames, height, width, channels]",
                })
            }
        };
        if m > cfg.max_frames {
            return Err(Error::Range {
                value: m,
                lo: 1,
                hi: cfg.max_frames,
            });
        }
        if step >= cfg.train_steps {
            return Err(Error::Range {
                value: step,
                lo: 0,
                hi: cfg.train_steps - 1,
            });
        }
        if tape.value(prompt).shape() != [cfg.width] {
            return Err(Error::dim(
                "prompt",
                tape.value(prompt).shape(),
                &[cfg.width],
            ));
        }
        let s = cfg.tokens();

        let x = tape.reshape(latents, &[m, s, cfg.channels])?;
        let mut h = tape.linear(x, p.get("embed.in"))?;
        h = tape.add_broadcast(h, p.get("embed.in_bias"))?;
        h = tape.add_broadcast(h, p.get("embed.pos"))?;
        let t_row = tape.row(p.get("embed.time"), step)?;
        let cond = tape.add(t_row, prompt)?;
        h = tape.add_broadcast(h, cond)?;
        let frames = tape.slice_outer(p.get("embed.frame"), 0, m)?;
        let by_token = tape.swap_outer(h)?;
        let by_token = tape.add_broadcast(by_token, frames)?;
        h = tape.swap_outer(by_token)?;

        for b in 0..cfg.blocks {
            let n = tape.layer_norm(h, LN_EPS)?;
            let a = self.attention(tape, p, n, Site::spatial(b), hooks)?;
            h = tape.add(h, a)?;

            let by_token = tape.swap_outer(h)?;
            let n = tape.layer_norm(by_token, LN_EPS)?;
            let a = self.attention(tape, p, n, Site::temporal(b), hooks)?;
            let by_token = tape.add(by_token, a)?;
            h = tape.swap_outer(by_token)?;

            let n = tape.layer_norm(h, LN_EPS)?;
            let up = tape.linear(n, p.get(&format!("blocks.{b}.mlp.up")))?;
            let up = tape.add_broadcast(up, p.get(&format!("blocks.{b}.mlp.up_bias")))?;
            let act = tape.silu(up)?;
            let down = tape.linear(act, p.get(&format!("blocks.{b}.mlp.down")))?;
            let down = tape.add_broadcast(down, p.get(&format!("blocks.{b}.mlp.down_bias")))?;
            h = tape.add(h, down)?;
        }

        let n = tape.layer_norm(h, LN_EPS)?;
        let out = tape.linear(n, p.get("head.out"))?;
        let out = tape.add_broadcast(out, p.get("head.out_bias"))?;
        tape.reshape(out, &shape)
    }

    /// Single-head self-attention over the middle axis of `x: [batch, len, d]`.
    fn attention(
        &self,
        tape: &mut Tape,
        p: &Params,
        x: Var,
        site: Site,
        hooks: &mut AttentionHooks<'_>,
    ) -> Result<Var> {
        let kind = match site.kind {
            AttentionKind::Spatial => "spatial",
            AttentionKind::Temporal => "temporal",
        };
        let prefix = format!("blocks.{}.{kind}", site.block);
        let q = tape.linear(x, p.get(&format!("{prefix}.q")))?;
        let k = tape.linear(x, p.get(&format!("{prefix}.k")))?;
        let v = tape.linear(x, p.get(&format!("{prefix}.v")))?;
        let raw = tape.batch_matmul(q, k, true)?;
        let mut scores = tape.scale(raw, 1.0 / libm::sqrtf(self.weights.config.width as f32))?;
        if hooks.capture_taps {
            hooks.taps.push(AttentionTap {
                site,
                q: tape.value(q).clone(),
                k: tape.value(k).clone(),
            });
        }
        if let Some(ov) = hooks.override_for(site) {
            let (replacement, mask) = ov.apply(tape.value(scores), tape.value(q), tape.value(k))?;
            scores = tape.substitute(scores, &replacement, mask)?;
        }
        let probs = tape.softmax(scores)?;
        if hooks.capture_maps {
            hooks.maps.push(AttentionMap {
                site,
                weights: tape.value(probs).clone(),
            });
        }
        let mixed = tape.batch_matmul(probs, v, false)?;
        tape.linear(mixed, p.get(&format!("{prefix}.o")))
    }
}

impl NoiseModel for Denoiser<'_> {
    fn prompt_vector(&self, prompt: Prompt) -> Tensor {
        self.weights.embed_prompt(prompt).vector
    }

    fn record(
        &self,
        tape: &mut Tape,
        latents: Var,
        step: usize,
        prompt: Var,
        hooks: &mut AttentionHooks<'_>,
    ) -> Result<Var> {
        let params = self.insert_params(tape)?;
        self.forward(tape, &params, latents, step, prompt, hooks)
    }
}
