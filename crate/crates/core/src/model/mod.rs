//! Sequential layer graphs with fake-quantization instrumentation.
//!
//! Every Linear, Conv1d and LayerNorm layer is a quantization slot: its
//! input activation is fake-quantized with a per-layer scale from a
//! [`ScaleVector`] and its weight tensor with a Max-calibrated per-tensor
//! scale. Everything else runs in `f64`.

mod layer;
mod manifest;

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layer::{gelu, Layer, LayerKind, Op};
pub use manifest::{LayerEntry, ModelManifest};

use crate::calib::DEGENERATE_BETA;
use crate::dataset::CalibrationSet;
use crate::quant::{check_bits, QuantError, QuantParams};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer '{layer}': {reason}")]
    Shape { layer: String, reason: String },
    #[error("input shape {actual:?} does not match model input {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("duplicate layer name '{0}'")]
    DuplicateName(String),
    #[error("unknown layer kind '{kind}' for layer '{layer}'")]
    UnknownKind { layer: String, kind: String },
    #[error("layer '{layer}' is missing weight '{key}'")]
    MissingWeight { layer: String, key: String },
    #[error("layer '{layer}' is missing hyperparameter '{key}'")]
    MissingHyper { layer: String, key: String },
    #[error("unknown quantized layer '{name}'; available: {}", available.join(", "))]
    UnknownLayer {
        name: String,
        available: Vec<String>,
    },
    #[error("scale vector has {actual} entries, model has {expected} quantized layers")]
    ScaleLength { expected: usize, actual: usize },
    #[error("scale {index} is {value}; scales must be positive and finite")]
    InvalidScale { index: usize, value: f64 },
    #[error("layer '{layer}' activations are all zero")]
    DegenerateActivations { layer: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Per-layer activation scales `s_1 .. s_N` at a fixed bit-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleVector {
    scales: Vec<f64>,
    bits: u8,
}

impl ScaleVector {
    pub fn new(scales: Vec<f64>, bits: u32) -> Result<Self, ModelError> {
        let bits = check_bits(bits)?;
        if let Some((index, &value)) = scales
            .iter()
            .enumerate()
            .find(|(_, s)| !(**s > 0.0 && s.is_finite()))
        {
            return Err(ModelError::InvalidScale { index, value });
        }
        Ok(Self { scales, bits })
    }

    /// Scales derived from clipping bounds.
    pub fn from_betas(betas: &[f64], bits: u32) -> Result<Self, ModelError> {
        let scales = betas
            .iter()
            .map(|&b| QuantParams::from_range(b, bits).map(|p| p.scale()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(scales, bits)
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    /// Clipping bounds `s * (2^b - 1) / 2`.
    pub fn betas(&self) -> Vec<f64> {
        self.scales
            .iter()
            .map(|&s| crate::quant::beta_from_scale(s, self.bits))
            .collect()
    }

    pub fn params(&self) -> Vec<QuantParams> {
        self.scales
            .iter()
            .map(|&s| QuantParams::from_scale(s, self.bits as u32).expect("validated scale"))
            .collect()
    }
}

/// Bit-widths plus the Max-calibrated, pre-quantized weights of each slot.
#[derive(Debug, Clone)]
pub struct QuantConfig {
    weight_bits: u8,
    act_bits: u8,
    weight_params: Vec<QuantParams>,
    weights: Vec<Tensor>,
}

impl QuantConfig {
    pub fn new(graph: &ModelGraph, weight_bits: u32, act_bits: u32) -> Result<Self, ModelError> {
        let weight_bits = check_bits(weight_bits)?;
        let act_bits = check_bits(act_bits)?;
        let mut weight_params = Vec::new();
        let mut weights = Vec::new();
        for layer in graph.quantized_layers() {
            let w = layer.weight().expect("quantized layers carry weights");
            let beta = match w.abs_max() {
                m if m > 0.0 => m,
                _ => DEGENERATE_BETA,
            };
            let p = QuantParams::from_range(beta, weight_bits as u32)?;
            weights.push(crate::quant::fake_quantize(w, &p));
            weight_params.push(p);
        }
        Ok(Self {
            weight_bits,
            act_bits,
            weight_params,
            weights,
        })
    }

    pub fn weight_bits(&self) -> u8 {
        self.weight_bits
    }

    pub fn act_bits(&self) -> u8 {
        self.act_bits
    }

    pub fn weight_params(&self) -> &[QuantParams] {
        &self.weight_params
    }

    /// Fake-quantized weight tensor of slot `slot`.
    pub fn quantized_weight(&self, slot: usize) -> &Tensor {
        &self.weights[slot]
    }
}

/// Hooks applied at each quantization slot during a forward pass.
pub trait Instrumentation: Sync {
    /// Transforms the input activation of slot `slot` in place.
    fn activation(&self, slot: usize, values: &mut [f64]);
    /// Weight used by slot `slot` instead of the layer's own.
    fn weight(&self, slot: usize) -> Option<&Tensor>;
}

/// No-op instrumentation: the exact floating-point network.
pub struct FullPrecision;

impl Instrumentation for FullPrecision {
    fn activation(&self, _: usize, _: &mut [f64]) {}

    fn weight(&self, _: usize) -> Option<&Tensor> {
        None
    }
}

/// Fake-quantizes activations with per-slot parameters and swaps in
/// pre-quantized weights.
pub struct FakeQuant<'a> {
    act: Vec<QuantParams>,
    config: &'a QuantConfig,
}

impl<'a> FakeQuant<'a> {
    pub fn new(
        graph: &ModelGraph,
        scales: &ScaleVector,
        config: &'a QuantConfig,
    ) -> Result<Self, ModelError> {
        if scales.len() != graph.num_quantized() {
            return Err(ModelError::ScaleLength {
                expected: graph.num_quantized(),
                actual: scales.len(),
            });
        }
        let act = scales
            .scales()
            .iter()
            .map(|&s| QuantParams::from_scale(s, config.act_bits as u32))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { act, config })
    }
}

impl Instrumentation for FakeQuant<'_> {
    fn activation(&self, slot: usize, values: &mut [f64]) {
        self.act[slot].fake_quantize_in_place(values);
    }

    fn weight(&self, slot: usize) -> Option<&Tensor> {
        Some(self.config.quantized_weight(slot))
    }
}

/// A validated sequential network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the
    /// output shape.
    shapes: Vec<Vec<usize>>,
    quantized: Vec<usize>,
}

impl ModelGraph {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self, ModelError> {
        let mut names = HashSet::new();
        for l in &layers {
            if !names.insert(l.name.as_str()) {
                return Err(ModelError::DuplicateName(l.name.clone()));
            }
        }
        let mut shapes = vec![input_shape.clone()];
        for l in &layers {
            let next = l.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        let quantized = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind().is_quantized())
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            input_shape,
            layers,
            shapes,
            quantized,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Input shape of layer `index`.
    pub fn layer_input_shape(&self, index: usize) -> &[usize] {
        &self.shapes[index]
    }

    /// Layer indices of the quantization slots, in order.
    pub fn quantized_indices(&self) -> &[usize] {
        &self.quantized
    }

    pub fn num_quantized(&self) -> usize {
        self.quantized.len()
    }

    pub fn quantized_layers(&self) -> impl Iterator<Item = &Layer> {
        self.quantized.iter().map(|&i| &self.layers[i])
    }

    pub fn quantized_names(&self) -> Vec<String> {
        self.quantized_layers().map(|l| l.name.clone()).collect()
    }

    /// Slot index of the quantized layer called `name`.
    pub fn slot_of(&self, name: &str) -> Result<usize, ModelError> {
        self.quantized_layers()
            .position(|l| l.name == name)
            .ok_or_else(|| ModelError::UnknownLayer {
                name: name.to_string(),
                available: self.quantized_names(),
            })
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(ModelError::InputShape {
                expected: self.input_shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass with hooks at every quantization slot. When `record` is
    /// set, the (instrumented) input of each slot is returned as well.
    pub fn forward_instrumented(
        &self,
        x: &Tensor,
        hooks: &dyn Instrumentation,
        record: bool,
    ) -> Result<(Tensor, Vec<Tensor>), ModelError> {
        self.check_input(x)?;
        let mut buf = x.data().to_vec();
        let mut recorded = Vec::new();
        let mut slot = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let shape = &self.shapes[i];
            let mut weight = None;
            if layer.kind().is_quantized() {
                hooks.activation(slot, &mut buf);
                if record {
                    recorded.push(Tensor::new(shape.clone(), buf.clone())?);
                }
                weight = hooks.weight(slot);
                slot += 1;
            }
            buf = layer.forward(&buf, shape, weight);
        }
        let out = Tensor::new(self.output_shape().to_vec(), buf)?;
        Ok((out, recorded))
    }

    /// Exact forward pass plus the input activation of every quantized layer.
    pub fn forward_fp(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>), ModelError> {
        self.forward_instrumented(x, &FullPrecision, true)
    }

    /// Simulated integer inference `f_q(x; S)`.
    pub fn forward_quant(
        &self,
        x: &Tensor,
        scales: &ScaleVector,
        config: &QuantConfig,
    ) -> Result<Tensor, ModelError> {
        let hooks = FakeQuant::new(self, scales, config)?;
        Ok(self.forward_instrumented(x, &hooks, false)?.0)
    }

    /// Runs a single quantized layer on `input`, optionally overriding its
    /// weight.
    pub fn run_slot(
        &self,
        slot: usize,
        input: &Tensor,
        weight: Option<&Tensor>,
    ) -> Result<Tensor, ModelError> {
        let index = self.quantized[slot];
        let shape = &self.shapes[index];
        if input.shape() != shape.as_slice() {
            return Err(ModelError::InputShape {
                expected: shape.clone(),
                actual: input.shape().to_vec(),
            });
        }
        let out = self.layers[index].forward(input.data(), shape, weight);
        Ok(Tensor::new(self.shapes[index + 1].clone(), out)?)
    }

    /// Per-sample full-precision inputs of every quantized layer,
    /// `result[slot][sample]`.
    pub fn collect_sample_activations(
        &self,
        cal: &CalibrationSet,
    ) -> Result<Vec<Vec<Tensor>>, ModelError> {
        let per_sample = cal
            .inputs()
            .par_iter()
            .map(|x| self.forward_fp(x).map(|(_, acts)| acts))
            .collect::<Result<Vec<_>, _>>()?;
        let mut per_slot: Vec<Vec<Tensor>> =
            vec![Vec::with_capacity(cal.len()); self.num_quantized()];
        for acts in per_sample {
            for (slot, a) in acts.into_iter().enumerate() {
                per_slot[slot].push(a);
            }
        }
        Ok(per_slot)
    }

    /// Concatenated full-precision inputs of every quantized layer across
    /// all samples, as flat tensors.
    pub fn collect_activations(&self, cal: &CalibrationSet) -> Result<Vec<Tensor>, ModelError> {
        self.collect_sample_activations(cal)?
            .into_iter()
            .map(|samples| {
                let data: Vec<f64> = samples.into_iter().flat_map(Tensor::into_data).collect();
                Tensor::from_vec(data).map_err(ModelError::from)
            })
            .collect()
    }

    /// Empirical CDF of `|activation| / max|activation|` at the input of
    /// `layer`, downsampled to at most [`CDF_MAX_POINTS`] points. The last
    /// point is always `(1, 1)`.
    pub fn activation_cdf(
        &self,
        cal: &CalibrationSet,
        layer: &str,
    ) -> Result<Vec<(f64, f64)>, ModelError> {
        let slot = self.slot_of(layer)?;
        let acts = self.collect_activations(cal)?;
        let values = acts[slot].data();
        let max = acts[slot].abs_max();
        if max == 0.0 {
            return Err(ModelError::DegenerateActivations {
                layer: layer.to_string(),
            });
        }
        let mut normalized: Vec<f64> = values.iter().map(|v| v.abs() / max).collect();
        normalized.sort_by(f64::total_cmp);
        Ok(downsample_cdf(&normalized))
    }
}

pub const CDF_MAX_POINTS: usize = 1000;

fn downsample_cdf(sorted: &[f64]) -> Vec<(f64, f64)> {
    let n = sorted.len();
    let m = n.min(CDF_MAX_POINTS);
    (0..m)
        .map(|j| {
            let idx = ((j + 1) * n).div_ceil(m) - 1;
            (sorted[idx], (idx + 1) as f64 / n as f64)
        })
        .collect()
}
