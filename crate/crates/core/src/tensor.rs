//! Dense `channels × height × width` latent grids.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// A `1 × 1 × len` row, the layout used for flat toy latents.
    pub fn row(len: usize) -> Self {
        Self::new(1, 1, len)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        match *dims {
            [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(Self::new(c, h, w)),
            _ => Err(Error::InvalidArgument(format!(
                "shape must be three positive extents, got {dims:?}"
            ))),
        }
    }
}

/// The `z` of every sampling formula. Values are kept in `f64`; the wire and
/// dump formats narrow to little-endian `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidArgument("latent shape has a zero extent".into()));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(&[shape.len()], &[data.len()]));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "latent entry {i} is not finite"
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_row(data: Vec<f64>) -> Result<Self> {
        Self::new(Shape::row(data.len()), data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ensure_same_shape(&self, other: &LatentTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(&self.shape.dims(), &other.shape.dims()));
        }
        Ok(())
    }

    /// `a·self + b·other`, elementwise.
    pub fn axpby(&self, a: f64, other: &LatentTensor, b: f64) -> Result<LatentTensor> {
        self.ensure_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(Self {
            shape: self.shape,
            data,
        })
    }

    pub fn scale(&self, a: f64) -> LatentTensor {
        self.map(|v| a * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentTensor {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(
        &self,
        other: &LatentTensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<LatentTensor> {
        self.ensure_same_shape(other)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Base64 of the values narrowed to little-endian `f32`.
    pub fn data_base64(&self) -> String {
        encode_f32_le(&self.data)
    }

    pub fn to_wire(&self) -> WireTensor {
        WireTensor {
            shape: self.shape.dims().to_vec(),
            data: self.data_base64(),
        }
    }

    pub fn from_wire(wire: &WireTensor) -> Result<Self> {
        let shape = Shape::from_dims(&wire.shape)?;
        Self::new(shape, decode_f32_le(&wire.data)?)
    }
}

/// Tensor in transport form: shape plus base64 little-endian `f32` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

pub fn encode_f32_le(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_f32_le(text: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(text.trim())
        .map_err(|e| Error::Protocol(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Protocol(format!(
            "payload of {} bytes is not a whole number of f32 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_non_finite_and_wrong_length() {
        assert!(LatentTensor::new(Shape::row(2), vec![1.0]).is_err());
        assert!(LatentTensor::new(Shape::row(2), vec![1.0, f64::NAN]).is_err());
        assert!(LatentTensor::new(Shape::new(0, 1, 1), vec![]).is_err());
    }

    #[test]
    fn axpby_checks_shape() {
        let a = LatentTensor::from_row(vec![1.0, 2.0]).unwrap();
        let b = LatentTensor::from_row(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(a.axpby(1.0, &b, 1.0), Err(Error::Shape { .. })));
    }

    proptest! {
        #[test]
        fn f32_wire_round_trip_is_bit_exact(values in prop::collection::vec(-1e30f32..1e30f32, 1..64)) {
            let wide: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            let t = LatentTensor::from_row(wide.clone()).unwrap();
            let back = LatentTensor::from_wire(&t.to_wire()).unwrap();
            for (a, b) in back.data().iter().zip(&values) {
                prop_assert_eq!((*a as f32).to_bits(), b.to_bits());
            }
        }
    }
}
