use alloc::string::String;
use alloc::vec::Vec;

use crate::denoiser::Site;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    Shape {
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("gradient requested from unknown graph {0}")]
    UnknownGraph(u64),
    #[error("rank {rank} must be at least 1 and below min({h1}, {h2})")]
    Rank { h1: usize, h2: usize, rank: usize },
    #[error("unknown token `{0}`")]
    Vocabulary(String),
    #[error("override at {site} rejected: {reason}")]
    Override { site: Site, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("value {value} outside [{lo}, {hi}]")]
    Range { value: usize, lo: usize, hi: usize },
    #[error("frame alignment produced a non-finite gradient at step {step}")]
    Alignment { step: usize },
    #[error("training diverged at update {update}: loss {loss} exceeds 10x initial {initial}")]
    Diverged {
        update: usize,
        loss: f32,
        initial: f32,
    },
    #[error("motion is undecidable: {0}")]
    Undecidable(&'static str),
    #[error("pipeline state became non-finite at step {step}")]
    NonFinite { step: usize },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
