//! Dense row-major tensors and the `QCT1` binary tensor format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

/// Magic bytes at the start of every tensor file.
pub const QCT1_MAGIC: &[u8; 4] = b"QCT1";

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} contains a zero-sized dimension")]
    ZeroDim(Vec<usize>),
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("empty input")]
    Empty,
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Dense tensor of `f64` values in row-major order.
///
/// Every element is finite and every dimension is positive. Tensors are
/// never mutated after construction through the public API.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroDim(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { shape, data })
    }

    /// One-dimensional tensor over `data`.
    pub fn from_vec(data: Vec<f64>) -> Result<Self, TensorError> {
        if data.is_empty() {
            return Err(TensorError::Empty);
        }
        Self::new(vec![data.len()], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Always false: zero-sized dimensions are rejected at construction.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Largest absolute value.
    pub fn abs_max(&self) -> f64 {
        abs_max(&self.data).expect("tensors are never empty")
    }

    /// Mean squared element difference.
    pub fn mse(&self, other: &Tensor) -> Result<f64, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch(
                self.shape.clone(),
                other.shape.clone(),
            ));
        }
        Ok(sum_sq_diff(&self.data, &other.data) / self.data.len() as f64)
    }

    /// Applies `f` element-wise, checking finiteness of the result.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor, TensorError> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Reads a `QCT1` file, widening the stored `f32` values.
    pub fn read_qct(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| TensorError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode_qct(&bytes).map_err(|e| match e {
            TensorError::Format { reason, .. } => TensorError::Format {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }

    /// Writes this tensor as `QCT1`, narrowing values to `f32`.
    pub fn write_qct(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        let path = path.as_ref();
        let io_err = |source| TensorError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io_err)?;
        file.write_all(&self.encode_qct()).map_err(io_err)?;
        Ok(())
    }

    pub fn encode_qct(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(QCT1_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode_qct(mut bytes: &[u8]) -> Result<Tensor, TensorError> {
        let format = |reason: &str| TensorError::Format {
            path: "<memory>".into(),
            reason: reason.into(),
        };
        let mut magic = [0u8; 4];
        bytes
            .read_exact(&mut magic)
            .map_err(|_| format("truncated header"))?;
        if &magic != QCT1_MAGIC {
            return Err(format("bad magic, expected QCT1"));
        }
        let mut word = [0u8; 4];
        let mut next_u32 = |bytes: &mut &[u8]| -> Result<u32, TensorError> {
            bytes
                .read_exact(&mut word)
                .map_err(|_| format("truncated header"))?;
            Ok(u32::from_le_bytes(word))
        };
        let rank = next_u32(&mut bytes)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(next_u32(&mut bytes)? as usize);
        }
        let len: usize = shape.iter().product();
        if bytes.len() != 4 * len {
            return Err(format(&format!(
                "expected {} payload bytes, found {}",
                4 * len,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Tensor::new(shape, data)
    }
}

/// Signed integer tensor produced by quantization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<i32>,
    pub(crate) bits: u8,
}

impl IntTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }
}

pub(crate) fn check_finite(data: &[f64]) -> Result<(), TensorError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

/// Largest absolute value of a slice, `None` when empty.
pub fn abs_max(values: &[f64]) -> Option<f64> {
    values.iter().map(|v| v.abs()).reduce(f64::max)
}

pub(crate) fn sum_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
