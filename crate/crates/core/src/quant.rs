//! Uniform symmetric quantization.
//!
//! A clipping range `[-beta, beta]` at `bits` bits gives the scale
//! `s = (beta - alpha) / (2^bits - 1)` with `alpha = -beta` and zero point 0.
//! Quantization rounds `r / s` half-to-even and clamps to the signed range
//! `[-2^(bits-1), 2^(bits-1) - 1]`. Because the scale formula spans
//! `2^bits - 1` steps over `2 * beta`, the extreme grid points `±beta` are
//! half-integers; the clamp keeps the result representable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{IntTensor, Tensor};

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("clipping bound beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("bit-width {0} outside supported range {MIN_BITS}..={MAX_BITS}")]
    InvalidBits(u32),
    #[error("integer tensor has {actual} bits, parameters expect {expected}")]
    BitsMismatch { expected: u8, actual: u8 },
}

/// Symmetric per-tensor quantization parameters.
///
/// Only `beta` and `bits` are stored on disk; `alpha`, `scale` and
/// `zero_point` are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StoredParams", into = "StoredParams")]
pub struct QuantParams {
    beta: f64,
    bits: u8,
    scale: f64,
}

#[derive(Serialize, Deserialize)]
struct StoredParams {
    beta: f64,
    bits: u8,
}

impl TryFrom<StoredParams> for QuantParams {
    type Error = QuantError;

    fn try_from(p: StoredParams) -> Result<Self, Self::Error> {
        QuantParams::from_range(p.beta, p.bits as u32)
    }
}

impl From<QuantParams> for StoredParams {
    fn from(p: QuantParams) -> Self {
        StoredParams {
            beta: p.beta,
            bits: p.bits,
        }
    }
}

pub fn check_bits(bits: u32) -> Result<u8, QuantError> {
    if (MIN_BITS as u32..=MAX_BITS as u32).contains(&bits) {
        Ok(bits as u8)
    } else {
        Err(QuantError::InvalidBits(bits))
    }
}

/// `2^bits - 1`, the number of steps across the clipping range.
pub fn levels(bits: u8) -> f64 {
    ((1u32 << bits) - 1) as f64
}

impl QuantParams {
    /// Symmetric parameters for the clipping range `[-beta, beta]`.
    pub fn from_range(beta: f64, bits: u32) -> Result<Self, QuantError> {
        let bits = check_bits(bits)?;
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(QuantError::InvalidBeta(beta));
        }
        let alpha = -beta;
        let scale = (beta - alpha) / levels(bits);
        Ok(Self { beta, bits, scale })
    }

    /// Parameters whose clipping bound is `scale * (2^bits - 1) / 2`.
    ///
    /// The stored scale is recomputed from that bound, so it can differ from
    /// the argument in the last ulp.
    pub fn from_scale(scale: f64, bits: u32) -> Result<Self, QuantError> {
        let bits_u8 = check_bits(bits)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(QuantError::InvalidScale(scale));
        }
        Self::from_range(beta_from_scale(scale, bits_u8), bits)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn alpha(&self) -> f64 {
        -self.beta
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn zero_point(&self) -> i32 {
        0
    }

    pub fn qmin(&self) -> i32 {
        -(1i32 << (self.bits - 1))
    }

    pub fn qmax(&self) -> i32 {
        (1i32 << (self.bits - 1)) - 1
    }

    #[inline]
    fn quantize_value(&self, r: f64) -> i32 {
        let q = (r / self.scale).round_ties_even() - self.zero_point() as f64;
        q.clamp(self.qmin() as f64, self.qmax() as f64) as i32
    }

    #[inline]
    fn dequantize_value(&self, q: i32) -> f64 {
        (q + self.zero_point()) as f64 * self.scale
    }

    /// Fake-quantizes a single value.
    #[inline]
    pub fn fake_quantize_value(&self, r: f64) -> f64 {
        self.dequantize_value(self.quantize_value(r))
    }

    /// Fake-quantizes a buffer in place.
    pub fn fake_quantize_in_place(&self, values: &mut [f64]) {
        for v in values {
            *v = self.fake_quantize_value(*v);
        }
    }
}

/// Inverse of the scale formula: `beta = s * (2^bits - 1) / 2`.
pub fn beta_from_scale(scale: f64, bits: u8) -> f64 {
    scale * levels(bits) / 2.0
}

pub fn scale_from_range(beta: f64, bits: u32) -> Result<QuantParams, QuantError> {
    QuantParams::from_range(beta, bits)
}

pub fn quantize(r: &Tensor, p: &QuantParams) -> IntTensor {
    IntTensor {
        shape: r.shape().to_vec(),
        data: r.data().iter().map(|&v| p.quantize_value(v)).collect(),
        bits: p.bits,
    }
}

pub fn dequantize(q: &IntTensor, p: &QuantParams) -> Result<Tensor, QuantError> {
    if q.bits() != p.bits {
        return Err(QuantError::BitsMismatch {
            expected: p.bits,
            actual: q.bits(),
        });
    }
    let data = q.data().iter().map(|&v| p.dequantize_value(v)).collect();
    Ok(Tensor::new(q.shape().to_vec(), data).expect("dequantized grid values are finite"))
}

/// `dequantize(quantize(r))` without materializing the integer tensor.
pub fn fake_quantize(r: &Tensor, p: &QuantParams) -> Tensor {
    let data = r.data().iter().map(|&v| p.fake_quantize_value(v)).collect();
    Tensor::new(r.shape().to_vec(), data).expect("fake-quantized values are finite")
}
