//! Attention sites, query/key taps and pre-softmax score overrides.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::guidance::{compose_spatial, compose_temporal};
use crate::tensor::{dims3, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttentionKind {
    /// Within a frame over its pixel tokens; frames form the batch.
    Spatial,
    /// Across frames at each pixel position; positions form the batch.
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub block: usize,
    pub kind: AttentionKind,
}

impl Site {
    pub fn spatial(block: usize) -> Self {
        Self {
            block,
            kind: AttentionKind::Spatial,
        }
    }

    pub fn temporal(block: usize) -> Self {
        Self {
            block,
            kind: AttentionKind::Temporal,
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            AttentionKind::Spatial => "spatial",
            AttentionKind::Temporal => "temporal",
        };
        write!(f, "block {} {kind}", self.block)
    }
}

/// Projected query and key at one site, before the `1/√d` scaling.
/// Spatial taps are `[frames, tokens, d]`, temporal taps `[tokens, frames, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTap {
    pub site: Site,
    pub q: Tensor,
    pub k: Tensor,
}

/// Post-softmax attention weights at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub site: Site,
    pub weights: Tensor,
}

/// How a site's score tensor is rewritten before the softmax.
#[derive(Debug, Clone, PartialEq)]
pub enum ScorePlan {
    /// Substitute every score with its own value.
    Identity,
    /// Replace the score blocks of the first `n` frames with reference-query
    /// cross scores. `ref_q` is `[1 | ≥n, tokens, d]`.
    SpatialReference { ref_q: Tensor, n: usize },
    /// Replace the first-frame key column with cross scores against the
    /// scaled reference key `ref_k` (`[tokens, 1, d]`).
    TemporalReference { ref_k: Tensor, lambda: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOverride {
    pub site: Site,
    pub plan: ScorePlan,
}

impl AttentionOverride {
    /// Returns the replacement scores and the mask of entries it replaces.
    pub(crate) fn apply(
        &self,
        scores: &Tensor,
        q: &Tensor,
        k: &Tensor,
    ) -> Result<(Tensor, Vec<bool>)> {
        let wrap = |e: Error| Error::Override {
            site: self.site,
            reason: format!("{e}"),
        };
        let [batch, rows, cols] = dims3(scores, "override").map_err(wrap)?;
        let (replacement, mask) = match &self.plan {
            ScorePlan::Identity => (scores.clone(), vec![true; scores.numel()]),
            ScorePlan::SpatialReference { ref_q, n } => {
                if self.site.kind != AttentionKind::Spatial {
                    return Err(wrap(Error::Config(
                        "spatial plan at a temporal site".into(),
                    )));
                }
                let out = compose_spatial(scores, ref_q, k, *n).map_err(wrap)?;
                let per = rows * cols;
                let mask = (0..scores.numel()).map(|i| i / per < *n).collect();
                (out, mask)
            }
            ScorePlan::TemporalReference { ref_k, lambda } => {
                if self.site.kind != AttentionKind::Temporal {
                    return Err(wrap(Error::Config(
                        "temporal plan at a spatial site".into(),
                    )));
                }
                let out = compose_temporal(scores, q, ref_k, *lambda).map_err(wrap)?;
                let mask = (0..scores.numel()).map(|i| i % cols == 0).collect();
                (out, mask)
            }
        };
        if replacement.shape() != [batch, rows, cols] {
            return Err(Error::Override {
                site: self.site,
                reason: format!(
                    "replacement shape {:?} differs from scores {:?}",
                    replacement.shape(),
                    scores.shape()
                ),
            });
        }
        Ok((replacement, mask))
    }
}

/// Per-call instrumentation for [`crate::denoiser::Denoiser`].
#[derive(Debug, Default)]
pub struct AttentionHooks<'o> {
    pub capture_taps: bool,
    pub capture_maps: bool,
    pub taps: Vec<AttentionTap>,
    pub maps: Vec<AttentionMap>,
    pub overrides: &'o [AttentionOverride],
}

impl<'o> AttentionHooks<'o> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn capturing() -> Self {
        Self {
            capture_taps: true,
            ..Self::default()
        }
    }

    pub fn with_overrides(overrides: &'o [AttentionOverride]) -> Self {
        Self {
            overrides,
            ..Self::default()
        }
    }

    pub fn tap(&self, site: Site) -> Option<&AttentionTap> {
        self.taps.iter().find(|t| t.site == site)
    }

    pub fn map(&self, site: Site) -> Option<&AttentionMap> {
        self.maps.iter().find(|m| m.site == site)
    }

    pub(crate) fn override_for(&self, site: Site) -> Option<&'o AttentionOverride> {
        self.overrides.iter().find(|o| o.site == site)
    }
}
