use alloc::string::String;

use crate::error::{Error, Result};
use crate::noise;
use crate::tensor::{matmul, Tensor};

/// Low-rank additive update `A·B` for one frozen projection matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    target: String,
    a: Tensor,
    b: Tensor,
}

impl LoraAdapter {
    pub fn new(target: impl Into<String>, a: Tensor, b: Tensor) -> Result<Self> {
        let (h1, r, r2, h2) = match (a.shape(), b.shape()) {
            (&[h1, r], &[r2, h2]) => (h1, r, r2, h2),
            _ => return Err(Error::dim("lora factors", a.shape(), b.shape())),
        };
        if r != r2 {
            return Err(Error::dim("lora factors", a.shape(), b.shape()));
        }
        check_rank(h1, h2, r)?;
        Ok(Self {
            target: target.into(),
            a,
            b,
        })
    }

    /// `A ~ U(±0.01)`, `B = 0`: the adapted weight starts at `W₀`.
    pub fn init(
        target: impl Into<String>,
        h1: usize,
        h2: usize,
        rank: usize,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        check_rank(h1, h2, rank)?;
        let a = noise::uniform(&[h1, rank], 0.01, seed, stream);
        Self::new(target, a, Tensor::zeros(&[rank, h2]))
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub(crate) fn set_factors(&mut self, a: Tensor, b: Tensor) {
        debug_assert_eq!(a.shape(), self.a.shape());
        debug_assert_eq!(b.shape(), self.b.shape());
        self.a = a;
        self.b = b;
    }

    pub fn merged(&self, w0: &Tensor) -> Result<Tensor> {
        lora_merge(w0, &self.a, &self.b)
    }
}

fn check_rank(h1: usize, h2: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank >= h1.min(h2) {
        return Err(Error::Rank { h1, h2, rank });
    }
    Ok(())
}

/// `W₀ + A·B`.
pub fn lora_merge(w0: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let delta = matmul(a, b)?;
    if delta.shape() != w0.shape() {
        return Err(Error::dim("lora_merge", w0.shape(), delta.shape()));
    }
    w0.add(&delta)
}

/// Trainable parameters of a rank-`r` adapter on an `h1 × h2` matrix.
pub fn lora_param_count(h1: usize, h2: usize, r: usize) -> Result<usize> {
    check_rank(h1, h2, r)?;
    Ok(h1 * r + r * h2)
}
