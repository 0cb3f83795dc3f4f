//! Seeded noise streams.
//!
//! Each `(seed, stream)` pair addresses an independent ChaCha8 stream, so
//! the noise for frame `i` depends only on the seed and `i`: adding frames
//! to a video never changes the noise of the earlier ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard-normal tensor drawn from one stream.
pub fn normal(shape: &[usize], seed: u64, stream_id: u64) -> Tensor {
    let mut rng = stream(seed, stream_id);
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
}

/// Normal frames `[frames, rest..]` where frame `i` comes from stream
/// `first_stream + i`.
pub fn normal_frames(frames: usize, frame_shape: &[usize], seed: u64, first_stream: u64) -> Tensor {
    let per: usize = frame_shape.iter().product();
    let mut shape = alloc::vec![frames];
    shape.extend_from_slice(frame_shape);
    let mut out = Tensor::zeros(&shape);
    for (i, chunk) in out.data_mut().chunks_mut(per).enumerate() {
        let mut rng = stream(seed, first_stream + i as u64);
        for v in chunk {
            *v = rng.sample(StandardNormal);
        }
    }
    out
}

pub fn uniform(shape: &[usize], bound: f32, seed: u64, stream_id: u64) -> Tensor {
    let mut rng = stream(seed, stream_id);
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}
