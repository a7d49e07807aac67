//! Post-training quantization calibration.
//!
//! Fake-quantization of activations and weights, the usual calibrators
//! (max, percentile, entropy, MSE), a CMA-ES optimizer, a small sequential
//! model runtime and an evolution-strategy scale refinement that searches
//! per-layer activation scales against an end-to-end error.

pub mod calib;
pub mod cmaes;
pub mod dataset;
pub mod esc;
pub mod model;
pub mod quant;
pub mod report;
pub mod synth;
pub mod tensor;

pub use calib::{Calibrator, Histogram};
pub use cmaes::{optimize, CmaOptions, CmaOutcome, CmaState};
pub use dataset::CalibrationSet;
pub use esc::{esc_calibrate, run_baseline, ErrorMetric, EscConfig, EscResult};
pub use model::{FakeQuant, FullPrecision, Layer, ModelGraph, Op, QuantConfig, ScaleVector};
pub use quant::QuantParams;
pub use synth::{synthesize, SynthTask};
pub use tensor::Tensor;
