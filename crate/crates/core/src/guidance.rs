//! Reference guidance: frame alignment of the sampled noise tokens and the
//! spatial/temporal attention composition against a reference-only pass.

use alloc::vec::Vec;

use crate::autodiff::{GradientRequest, Tape};
use crate::denoiser::{
    AttentionHooks, AttentionOverride, AttentionTap, NoiseModel, ScorePlan, Site,
};
use crate::error::{Error, Result};
use crate::tensor::{dims3, scaled_attention_scores, Tensor};

/// Reference key scale per unit of λ.
pub const LAMBDA_KEY_SCALE: f32 = 0.02;

/// Number of frames whose spatial attention uses the reference query at
/// descending step `t`: `max(1, M − (T − t))`, capped at `M`.
pub fn n_schedule(t: usize, steps: usize, tau2: usize, frames: usize) -> Result<usize> {
    if t < tau2 || t > steps {
        return Err(Error::Range {
            value: t,
            lo: tau2,
            hi: steps,
        });
    }
    let decayed = frames.saturating_sub(steps - t);
    Ok(decayed.clamp(1, frames.max(1)))
}

/// Spatial composition: the score blocks of frames `0..n` become
/// `ref_q · gen_kᵢᵀ / √d`; the rest keep their self-attention scores.
///
/// `ref_q` is either a single reference frame (`[1, S, d]`, broadcast) or
/// the tiled reference pass (`[≥n, S, d]`, frame `i` used for frame `i`).
pub fn compose_spatial(
    self_scores: &Tensor,
    ref_q: &Tensor,
    gen_k: &Tensor,
    n: usize,
) -> Result<Tensor> {
    let [m, s, s2] = dims3(self_scores, "compose_spatial")?;
    let [mk, sk, d] = dims3(gen_k, "compose_spatial")?;
    let [r, sq, dq] = dims3(ref_q, "compose_spatial")?;
    if s != s2 || mk != m || sk != s || sq != s || dq != d {
        return Err(Error::dim(
            "compose_spatial",
            self_scores.shape(),
            gen_k.shape(),
        ));
    }
    if n > m {
        return Err(Error::Range {
            value: n,
            lo: 0,
            hi: m,
        });
    }
    if r != 1 && r < n {
        return Err(Error::dim(
            "compose_spatial reference",
            ref_q.shape(),
            &[n, s, d],
        ));
    }
    let mut out = self_scores.clone();
    let block = s * s;
    for i in 0..n {
        let q = ref_q.slice_outer(if r == 1 { 0 } else { i }, 1)?;
        let k = gen_k.slice_outer(i, 1)?;
        let cross = scaled_attention_scores(&q, &k)?;
        out.data_mut()[i * block..(i + 1) * block].copy_from_slice(cross.data());
    }
    Ok(out)
}

/// Temporal composition: column 0 (the first-frame key) of every `M × M`
/// score matrix becomes `gen_q · k̃ᵀ / √d` with
/// `k̃ = ref_k · (1 + 0.02·λ)`.
///
/// The key scale is applied to the finished cross scores, which is the same
/// product by linearity and keeps `scores(λ) / scores(0)` exact up to one
/// rounding.
pub fn compose_temporal(
    self_scores: &Tensor,
    gen_q: &Tensor,
    ref_k: &Tensor,
    lambda: f32,
) -> Result<Tensor> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(alloc::format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    let [s, m, m2] = dims3(self_scores, "compose_temporal")?;
    let [sq, mq, d] = dims3(gen_q, "compose_temporal")?;
    let [sk, one, dk] = dims3(ref_k, "compose_temporal")?;
    if m != m2 || sq != s || mq != m || sk != s || one != 1 || dk != d {
        return Err(Error::dim(
            "compose_temporal",
            self_scores.shape(),
            ref_k.shape(),
        ));
    }
    let factor = 1.0 + lambda * LAMBDA_KEY_SCALE;
    let cross = scaled_attention_scores(gen_q, ref_k)?;
    let mut out = self_scores.clone();
    for (row, &c) in out.data_mut().chunks_mut(m).zip(cross.data()) {
        row[0] = c * factor;
    }
    Ok(out)
}

/// What the joint pass composes at one sampling step.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionPlan {
    pub n: usize,
    pub lambda: f32,
    pub spatial_enabled: bool,
    pub temporal_enabled: bool,
    /// Blocks whose spatial site is composed; empty means every block.
    pub spatial_blocks: Vec<usize>,
    /// Taps from the reference-only pass `ε([x^r]^N, t, null)`.
    pub reference_taps: Vec<AttentionTap>,
}

impl CompositionPlan {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.n < 1 || self.n > frames {
            return Err(Error::Range {
                value: self.n,
                lo: 1,
                hi: frames,
            });
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(alloc::format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Overrides for the joint pass, one per composed site.
    pub fn overrides(&self) -> Result<Vec<AttentionOverride>> {
        let mut out = Vec::new();
        for tap in &self.reference_taps {
            let site = tap.site;
            match site.kind {
                crate::denoiser::AttentionKind::Spatial => {
                    let in_mask =
                        self.spatial_blocks.is_empty() || self.spatial_blocks.contains(&site.block);
                    if self.spatial_enabled && in_mask {
                        out.push(AttentionOverride {
                            site,
                            plan: ScorePlan::SpatialReference {
                                ref_q: tap.q.clone(),
                                n: self.n,
                            },
                        });
                    }
                }
                crate::denoiser::AttentionKind::Temporal => {
                    if self.temporal_enabled {
                        out.push(AttentionOverride {
                            site,
                            plan: ScorePlan::TemporalReference {
                                ref_k: first_frame_key(&tap.k)?,
                                lambda: self.lambda,
                            },
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn tap(&self, site: Site) -> Option<&AttentionTap> {
        self.reference_taps.iter().find(|t| t.site == site)
    }
}

/// `[S, N, d] -> [S, 1, d]`: the key of frame 0 at each position.
fn first_frame_key(k: &Tensor) -> Result<Tensor> {
    let [s, n, d] = dims3(k, "first_frame_key")?;
    let mut out = Tensor::zeros(&[s, 1, d]);
    for i in 0..s {
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(&k.data()[i * n * d..i * n * d + d]);
    }
    Ok(out)
}

/// Trainable noise tokens `f² … f^M` and the accepted loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignState {
    /// `[(M−1), H, W, C]`, or `None` for a single-frame video.
    pub f_train: Option<Tensor>,
    /// `L_align` before the first step and after each accepted step.
    pub losses: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    pub iters: usize,
    pub step: f32,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            iters: 3,
            step: 0.05,
        }
    }
}

/// Refine the sampled tokens so that the joint pass predicts, for the
/// reference frame, the same noise as the reference frame denoised alone
/// under the null prompt: `L = ‖ε([x^r, f], t, P)[0] − ε(x^r, t, null)‖²`.
///
/// Only the tokens move. A step that raises the loss is retried at half the
/// step size, up to three times; if none is accepted refinement stops, so
/// the loss trace never increases.
pub fn frame_align<M: NoiseModel + ?Sized>(
    model: &M,
    reference: &Tensor,
    state: AlignState,
    step: usize,
    prompt_input: &Tensor,
    prompt_null: &Tensor,
    config: AlignConfig,
) -> Result<AlignState> {
    let Some(mut f) = state.f_train else {
        return Ok(AlignState {
            f_train: None,
            losses: Vec::new(),
        });
    };
    let target = model.predict(reference, step, prompt_null, &mut AttentionHooks::none())?;
    let (mut loss, mut grad) = align_loss(model, reference, &f, step, prompt_input, &target)?;
    let mut losses = alloc::vec![loss];
    for _ in 0..config.iters {
        if !grad.is_finite() {
            return Err(Error::Alignment { step });
        }
        let mut alpha = config.step;
        let mut accepted = false;
        for _ in 0..4 {
            let trial = f.zip_map(&grad, |x, g| x - alpha * g)?;
            let (l, g) = align_loss(model, reference, &trial, step, prompt_input, &target)?;
            if l.is_finite() && l <= loss {
                f = trial;
                loss = l;
                grad = g;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        losses.push(loss);
    }
    Ok(AlignState {
        f_train: Some(f),
        losses,
    })
}

/// `L_align` at tokens `f` and its gradient with respect to `f`.
pub fn align_loss<M: NoiseModel + ?Sized>(
    model: &M,
    reference: &Tensor,
    f: &Tensor,
    step: usize,
    prompt_input: &Tensor,
    target: &Tensor,
) -> Result<(f32, Tensor)> {
    let mut tape = Tape::new();
    let xr = tape.leaf(reference.clone());
    let fv = tape.leaf(f.clone());
    let joint = tape.concat_outer(&[xr, fv])?;
    let p = tape.leaf(prompt_input.clone());
    let eta = model.record(&mut tape, joint, step, p, &mut AttentionHooks::none())?;
    let first = tape.slice_outer(eta, 0, 1)?;
    let t = tape.leaf(target.clone());
    let diff = tape.sub(first, t)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.sum(sq)?;
    let value = tape.value(loss).data()[0];
    let mut g = tape.gradient(&GradientRequest::scalar(loss, alloc::vec![fv]))?;
    Ok((value, g.take(fv).expect("requested slot")))
}
