//! Keyed Gaussian noise streams.
//!
//! Every draw is addressed by `(seed, stream)`: the seed picks the ChaCha key
//! and the stream picks the ChaCha stream id, so a value never depends on how
//! many other draws happened before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{LatentTensor, Shape};

/// Named noise streams used by the samplers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseStream {
    /// The shared starting latent `z_T`.
    Init,
    /// Re-noising noise drawn after the step with this index.
    Renoise(usize),
    /// Free-form stream for fixtures and source-latent sampling.
    Custom(u64),
}

impl NoiseStream {
    fn id(self) -> u64 {
        match self {
            NoiseStream::Init => 0,
            NoiseStream::Renoise(step) => 1 + step as u64,
            NoiseStream::Custom(k) => (1 << 63) | k,
        }
    }
}

pub fn stream_rng(seed: u64, stream: NoiseStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Standard-normal tensor for `(seed, stream)`.
pub fn gaussian(seed: u64, stream: NoiseStream, shape: Shape) -> LatentTensor {
    let mut rng = stream_rng(seed, stream);
    let data = (0..shape.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    LatentTensor::new(shape, data).expect("standard normal draws are finite")
}
