//! Pixel ↔ latent codecs.
//!
//! The linear codec applies an invertible `k × k` affine map to every run of
//! `k` consecutive values of the flattened tensor, so shapes are preserved.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    #[default]
    Identity,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Codec {
    Identity,
    Linear(LinearCodec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearCodec {
    forward: DMatrix<f64>,
    inverse: DMatrix<f64>,
    bias: DVector<f64>,
}

impl LinearCodec {
    /// `matrix` is row-major `k × k`; it must be non-singular.
    pub fn new(block: usize, matrix: &[f64], bias: &[f64]) -> Result<Self> {
        if block == 0 || matrix.len() != block * block || bias.len() != block {
            return Err(Error::InvalidArgument(format!(
                "linear codec with block {block} needs {} matrix and {block} bias entries",
                block * block
            )));
        }
        let forward = DMatrix::from_row_slice(block, block, matrix);
        let inverse = forward
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("codec matrix is singular".into()))?;
        // reject numerically singular maps as well
        let residual = (&forward * &inverse - DMatrix::identity(block, block)).amax();
        if !residual.is_finite() || residual > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "codec matrix is ill-conditioned (residual {residual:e})"
            )));
        }
        Ok(Self {
            forward,
            inverse,
            bias: DVector::from_column_slice(bias),
        })
    }

    pub fn scaled_identity(block: usize, scale: f64) -> Result<Self> {
        let mut m = vec![0.0; block * block];
        for i in 0..block {
            m[i * block + i] = scale;
        }
        Self::new(block, &m, &vec![0.0; block])
    }

    pub fn block(&self) -> usize {
        self.bias.len()
    }

    fn apply(&self, x: &LatentTensor, decode: bool) -> Result<LatentTensor> {
        let k = self.block();
        if !x.len().is_multiple_of(k) {
            return Err(Error::shape(&[k], &[x.len()]));
        }
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.data().chunks_exact(k) {
            let v = DVector::from_column_slice(chunk);
            let y = if decode {
                &self.inverse * (v - &self.bias)
            } else {
                &self.forward * v + &self.bias
            };
            out.extend(y.iter());
        }
        LatentTensor::new(x.shape(), out)
    }
}

impl Codec {
    pub fn kind(&self) -> CodecKind {
        match self {
            Codec::Identity => CodecKind::Identity,
            Codec::Linear(_) => CodecKind::Linear,
        }
    }

    pub fn encode(&self, image: &LatentTensor) -> Result<LatentTensor> {
        match self {
            Codec::Identity => Ok(image.clone()),
            Codec::Linear(c) => c.apply(image, false),
        }
    }

    pub fn decode(&self, latent: &LatentTensor) -> Result<LatentTensor> {
        match self {
            Codec::Identity => Ok(latent.clone()),
            Codec::Linear(c) => c.apply(latent, true),
        }
    }
}
