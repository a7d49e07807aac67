use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tensor::Tensor;

/// Layer kinds understood by the interpreter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Linear,
    Conv1d,
    LayerNorm,
    #[serde(rename = "ReLU")]
    Relu,
    #[serde(rename = "GELU")]
    Gelu,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Linear => "Linear",
            LayerKind::Conv1d => "Conv1d",
            LayerKind::LayerNorm => "LayerNorm",
            LayerKind::Relu => "ReLU",
            LayerKind::Gelu => "GELU",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "Linear" => LayerKind::Linear,
            "Conv1d" => LayerKind::Conv1d,
            "LayerNorm" => LayerKind::LayerNorm,
            "ReLU" => LayerKind::Relu,
            "GELU" => LayerKind::Gelu,
            _ => return None,
        })
    }

    /// Whether the layer's input activation and weights are quantized.
    pub fn is_quantized(&self) -> bool {
        matches!(
            self,
            LayerKind::Linear | LayerKind::Conv1d | LayerKind::LayerNorm
        )
    }
}

/// Layer operation with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// `y = W x + b` over the last input dimension; `W` is `[out, in]`.
    Linear {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    /// Cross-correlation over `[channels, length]` inputs with zero padding;
    /// `W` is `[out_channels, in_channels, kernel]`.
    Conv1d {
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    },
    /// Normalization over the last dimension with affine `gamma`, `beta`.
    LayerNorm {
        gamma: Tensor,
        beta: Tensor,
        eps: f64,
    },
    Relu,
    /// Tanh approximation of GELU.
    Gelu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub op: Op,
}

impl Layer {
    pub fn new(name: impl Into<String>, op: Op) -> Self {
        Self {
            name: name.into(),
            op,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self.op {
            Op::Linear { .. } => LayerKind::Linear,
            Op::Conv1d { .. } => LayerKind::Conv1d,
            Op::LayerNorm { .. } => LayerKind::LayerNorm,
            Op::Relu => LayerKind::Relu,
            Op::Gelu => LayerKind::Gelu,
        }
    }

    /// The tensor that weight quantization applies to: `W` for Linear and
    /// Conv1d, `gamma` for LayerNorm. Biases stay in full precision.
    pub fn weight(&self) -> Option<&Tensor> {
        match &self.op {
            Op::Linear { weight, .. } | Op::Conv1d { weight, .. } => Some(weight),
            Op::LayerNorm { gamma, .. } => Some(gamma),
            Op::Relu | Op::Gelu => None,
        }
    }

    fn shape_err(&self, reason: String) -> ModelError {
        ModelError::Shape {
            layer: self.name.clone(),
            reason,
        }
    }

    /// Checks parameter consistency and returns the output shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, ModelError> {
        match &self.op {
            Op::Linear { weight, bias } => {
                let w = weight.shape();
                if w.len() != 2 {
                    return Err(self.shape_err(format!("weight must be [out, in], got {w:?}")));
                }
                check_bias(self, bias.as_ref(), w[0])?;
                match input.last() {
                    Some(&d) if d == w[1] => {
                        let mut out = input.to_vec();
                        *out.last_mut().unwrap() = w[0];
                        Ok(out)
                    }
                    _ => Err(self.shape_err(format!(
                        "input {input:?} does not end in weight input width {}",
                        w[1]
                    ))),
                }
            }
            Op::Conv1d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let w = weight.shape();
                if w.len() != 3 {
                    return Err(self.shape_err(format!(
                        "weight must be [out_channels, in_channels, kernel], got {w:?}"
                    )));
                }
                if *stride == 0 {
                    return Err(self.shape_err("stride must be positive".into()));
                }
                check_bias(self, bias.as_ref(), w[0])?;
                if input.len() != 2 || input[0] != w[1] {
                    return Err(
                        self.shape_err(format!("input {input:?} is not [{}, length]", w[1]))
                    );
                }
                let padded = input[1] + 2 * padding;
                if padded < w[2] {
                    return Err(self
                        .shape_err(format!("kernel {} longer than padded input {padded}", w[2])));
                }
                Ok(vec![w[0], (padded - w[2]) / stride + 1])
            }
            Op::LayerNorm { gamma, beta, eps } => {
                if eps.is_nan() || *eps <= 0.0 {
                    return Err(self.shape_err(format!("epsilon must be positive, got {eps}")));
                }
                let d = gamma.len();
                if gamma.shape() != [d] || beta.shape() != [d] {
                    return Err(
                        self.shape_err("gamma and beta must be equal-length vectors".into())
                    );
                }
                if input.last() != Some(&d) {
                    return Err(self.shape_err(format!(
                        "input {input:?} does not end in normalized width {d}"
                    )));
                }
                Ok(input.to_vec())
            }
            Op::Relu | Op::Gelu => Ok(input.to_vec()),
        }
    }

    /// Runs the layer on a flat row-major buffer of shape `in_shape`.
    /// `weight` replaces the layer's own weight tensor when given.
    pub(crate) fn forward(
        &self,
        x: &[f64],
        in_shape: &[usize],
        weight: Option<&Tensor>,
    ) -> Vec<f64> {
        match &self.op {
            Op::Linear { weight: w, bias } => {
                let w = weight.unwrap_or(w);
                let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
                let wd = w.data();
                let rows = x.len() / in_f;
                let mut y = Vec::with_capacity(rows * out_f);
                for r in 0..rows {
                    let xr = &x[r * in_f..(r + 1) * in_f];
                    for o in 0..out_f {
                        let wr = &wd[o * in_f..(o + 1) * in_f];
                        let mut acc = bias.as_ref().map_or(0.0, |b| b.data()[o]);
                        for (a, b) in wr.iter().zip(xr) {
                            acc += a * b;
                        }
                        y.push(acc);
                    }
                }
                y
            }
            Op::Conv1d {
                weight: w,
                bias,
                stride,
                padding,
            } => {
                let w = weight.unwrap_or(w);
                let (oc, ic, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
                let len = in_shape[1];
                let out_len = (len + 2 * padding - k) / stride + 1;
                let wd = w.data();
                let mut y = Vec::with_capacity(oc * out_len);
                for o in 0..oc {
                    for t in 0..out_len {
                        let mut acc = bias.as_ref().map_or(0.0, |b| b.data()[o]);
                        for c in 0..ic {
                            for j in 0..k {
                                let pos = (t * stride + j) as isize - *padding as isize;
                                if pos >= 0 && (pos as usize) < len {
                                    acc += wd[(o * ic + c) * k + j] * x[c * len + pos as usize];
                                }
                            }
                        }
                        y.push(acc);
                    }
                }
                y
            }
            Op::LayerNorm { gamma, beta, eps } => {
                let gamma = weight.unwrap_or(gamma);
                let d = gamma.len();
                let mut y = Vec::with_capacity(x.len());
                for row in x.chunks(d) {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for ((v, g), b) in row.iter().zip(gamma.data()).zip(beta.data()) {
                        y.push((v - mean) * inv * g + b);
                    }
                }
                y
            }
            Op::Relu => x.iter().map(|v| v.max(0.0)).collect(),
            Op::Gelu => x.iter().map(|&v| gelu(v)).collect(),
        }
    }
}

fn check_bias(layer: &Layer, bias: Option<&Tensor>, out: usize) -> Result<(), ModelError> {
    match bias {
        Some(b) if b.shape() != [out] => Err(layer.shape_err(format!(
            "bias shape {:?} does not match {out} outputs",
            b.shape()
        ))),
        _ => Ok(()),
    }
}

pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}
