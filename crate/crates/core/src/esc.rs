//! Two-stage activation-scale calibration.
//!
//! Stage 1 picks every layer's scale independently by minimizing the squared
//! error between the full-precision layer output and the output computed
//! from a fake-quantized input. Stage 2 refines all scales jointly with
//! CMA-ES against the task error of the whole quantized network, searching
//! over per-layer multipliers of the Stage-1 scales starting at all ones.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{grid_search, CalibError, Calibrator, DEGENERATE_BETA, MSE_GRID_SIZE};
use crate::cmaes::{self, Budget, CmaError, CmaOptions, TraceRecord};
use crate::dataset::{CalibrationSet, DatasetError};
use crate::model::{ModelError, ModelGraph, QuantConfig, ScaleVector};
use crate::quant::{fake_quantize, QuantParams};
use crate::tensor::{sum_sq_diff, Tensor};

/// Lower bound applied to CMA-ES multipliers before scaling.
pub const MULTIPLIER_FLOOR: f64 = 1e-6;

pub const DEFAULT_SIGMA0: f64 = 0.1;
pub const DEFAULT_BUDGET: usize = 100;
pub const DEFAULT_SAMPLES: usize = 100;

#[derive(Debug, Error)]
pub enum EscError {
    #[error("metric {metric} needs targets but the sample set has none")]
    MissingTargets { metric: ErrorMetric },
    #[error("target shape {target:?} does not match model output {output:?}")]
    TargetShape {
        target: Vec<usize>,
        output: Vec<usize>,
    },
    #[error("layer '{layer}': {source}")]
    Calibration {
        layer: String,
        #[source]
        source: CalibError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Cma(#[from] CmaError),
}

/// Task error `E(f_q(x; S), y)`, averaged over samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    /// Mean squared error against the sample targets.
    MseVsTarget,
    /// Mean squared error against the full-precision model output.
    MseVsFp32Output,
    /// Fraction of samples whose output argmax differs from the target
    /// argmax. Ties resolve to the lowest index on both sides.
    ClassificationError,
}

impl ErrorMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorMetric::MseVsTarget => "mse_vs_target",
            ErrorMetric::MseVsFp32Output => "mse_vs_fp32_output",
            ErrorMetric::ClassificationError => "classification_error",
        }
    }
}

impl fmt::Display for ErrorMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mse_vs_target" => Ok(ErrorMetric::MseVsTarget),
            "mse_vs_fp32_output" => Ok(ErrorMetric::MseVsFp32Output),
            "classification_error" => Ok(ErrorMetric::ClassificationError),
            _ => Err(format!(
                "unknown metric '{s}' (expected mse_vs_target, mse_vs_fp32_output or classification_error)"
            )),
        }
    }
}

/// Index of the largest element; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscConfig {
    pub act_bits: u32,
    pub weight_bits: u32,
    pub sigma0: f64,
    pub budget: usize,
    /// Number of calibration samples used, taken from the front of the set.
    pub n: usize,
    pub seed: u64,
    pub metric: ErrorMetric,
    /// CMA-ES population size; `None` uses `4 + floor(3 ln N)`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda: Option<usize>,
}

impl Default for EscConfig {
    fn default() -> Self {
        Self {
            act_bits: 8,
            weight_bits: 8,
            sigma0: DEFAULT_SIGMA0,
            budget: DEFAULT_BUDGET,
            n: DEFAULT_SAMPLES,
            seed: 0,
            metric: ErrorMetric::MseVsTarget,
            lambda: None,
        }
    }
}

impl EscConfig {
    pub fn with_bits(bits: u32) -> Self {
        Self {
            act_bits: bits,
            weight_bits: bits,
            ..Self::default()
        }
    }
}

/// Evaluates the task error of a quantized model on a fixed sample set.
pub struct Evaluator<'a> {
    graph: &'a ModelGraph,
    set: &'a CalibrationSet,
    metric: ErrorMetric,
    config: QuantConfig,
    /// Targets or full-precision outputs, per sample.
    reference: Vec<Tensor>,
    fp_outputs: Vec<Tensor>,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        graph: &'a ModelGraph,
        set: &'a CalibrationSet,
        metric: ErrorMetric,
        config: QuantConfig,
    ) -> Result<Self, EscError> {
        let fp_outputs = set
            .inputs()
            .par_iter()
            .map(|x| graph.forward_fp(x).map(|(y, _)| y))
            .collect::<Result<Vec<_>, _>>()?;
        let reference = match metric {
            ErrorMetric::MseVsFp32Output => fp_outputs.clone(),
            ErrorMetric::MseVsTarget | ErrorMetric::ClassificationError => {
                let targets = set.targets().ok_or(EscError::MissingTargets { metric })?;
                let target_len: usize = targets[0].len();
                let shape_ok = match metric {
                    ErrorMetric::MseVsTarget => targets[0].shape() == graph.output_shape(),
                    _ => target_len == fp_outputs[0].len(),
                };
                if !shape_ok {
                    return Err(EscError::TargetShape {
                        target: targets[0].shape().to_vec(),
                        output: graph.output_shape().to_vec(),
                    });
                }
                targets.to_vec()
            }
        };
        Ok(Self {
            graph,
            set,
            metric,
            config,
            reference,
            fp_outputs,
        })
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    pub fn metric(&self) -> ErrorMetric {
        self.metric
    }

    pub fn set(&self) -> &CalibrationSet {
        self.set
    }

    fn sample_error(&self, output: &Tensor, reference: &Tensor) -> f64 {
        match self.metric {
            ErrorMetric::MseVsTarget | ErrorMetric::MseVsFp32Output => {
                sum_sq_diff(output.data(), reference.data()) / output.len() as f64
            }
            ErrorMetric::ClassificationError => {
                (argmax(output.data()) != argmax(reference.data())) as u8 as f64
            }
        }
    }

    fn mean(&self, per_sample: Vec<f64>) -> f64 {
        per_sample.iter().sum::<f64>() / per_sample.len() as f64
    }

    /// Error of the full-precision model.
    pub fn fp_error(&self) -> f64 {
        let errs = self
            .fp_outputs
            .iter()
            .zip(&self.reference)
            .map(|(y, r)| self.sample_error(y, r))
            .collect();
        self.mean(errs)
    }

    /// Error of the quantized model under `scales`. Per-sample errors are
    /// computed in parallel and summed in sample order.
    pub fn evaluate(&self, scales: &ScaleVector) -> Result<f64, EscError> {
        let errs = self
            .set
            .inputs()
            .par_iter()
            .zip(self.reference.par_iter())
            .map(|(x, r)| {
                self.graph
                    .forward_quant(x, scales, &self.config)
                    .map(|y| self.sample_error(&y, r))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.mean(errs))
    }
}

/// Mean task error of the quantized model on `set`.
pub fn evaluate(
    graph: &ModelGraph,
    scales: &ScaleVector,
    set: &CalibrationSet,
    metric: ErrorMetric,
    config: &QuantConfig,
) -> Result<f64, EscError> {
    Evaluator::new(graph, set, metric, config.clone())?.evaluate(scales)
}

/// Clipping bound chosen for one layer, as written to reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    pub method: String,
    pub beta: f64,
    pub bits: u8,
    pub observed_absmax: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerwiseScales {
    pub scales: ScaleVector,
    pub layers: Vec<LayerReport>,
    pub warnings: Vec<String>,
}

fn degenerate_warning(layer: &str) -> String {
    let msg = format!(
        "layer '{layer}': all calibration activations are zero, using beta = {DEGENERATE_BETA:e}"
    );
    warn!("{msg}");
    msg
}

/// Stage 1: per-layer scale minimizing the summed squared error between
/// `l(x)` and `l_q(x; s)` over the calibration samples, where `l_q` uses the
/// fake-quantized input and the quantized weights. Candidates are
/// `k / 100 * max|x|`.
pub fn init_scales_mse(
    graph: &ModelGraph,
    cal: &CalibrationSet,
    config: &QuantConfig,
) -> Result<LayerwiseScales, EscError> {
    let bits = config.act_bits() as u32;
    let per_slot = graph.collect_sample_activations(cal)?;
    let names = graph.quantized_names();

    let chosen = per_slot
        .par_iter()
        .enumerate()
        .map(|(slot, inputs)| -> Result<(f64, f64), EscError> {
            let abs_max = inputs.iter().map(Tensor::abs_max).fold(0.0, f64::max);
            if abs_max == 0.0 {
                return Ok((DEGENERATE_BETA, 0.0));
            }
            let reference = inputs
                .iter()
                .map(|x| graph.run_slot(slot, x, None))
                .collect::<Result<Vec<_>, _>>()?;
            let weight = config.quantized_weight(slot);
            let mut failure = None;
            let (beta, _) = grid_search(abs_max, MSE_GRID_SIZE, |beta| {
                let p = QuantParams::from_range(beta, bits).expect("positive candidate");
                let mut loss = 0.0;
                for (x, r) in inputs.iter().zip(&reference) {
                    match graph.run_slot(slot, &fake_quantize(x, &p), Some(weight)) {
                        Ok(y) => loss += sum_sq_diff(y.data(), r.data()),
                        Err(e) => {
                            failure.get_or_insert(e);
                            return f64::INFINITY;
                        }
                    }
                }
                loss
            })
            .map_err(|source| EscError::Calibration {
                layer: names[slot].clone(),
                source,
            })?;
            if let Some(e) = failure {
                return Err(e.into());
            }
            Ok((beta, abs_max))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut warnings = Vec::new();
    let mut layers = Vec::new();
    for ((beta, abs_max), name) in chosen.iter().zip(&names) {
        if *abs_max == 0.0 {
            warnings.push(degenerate_warning(name));
        }
        layers.push(LayerReport {
            layer: name.clone(),
            method: "esc_init_mse".into(),
            beta: *beta,
            bits: bits as u8,
            observed_absmax: *abs_max,
        });
    }
    let betas: Vec<f64> = chosen.iter().map(|c| c.0).collect();
    Ok(LayerwiseScales {
        scales: ScaleVector::from_betas(&betas, bits)?,
        layers,
        warnings,
    })
}

/// Applies a baseline calibrator to every quantized layer's collected
/// input activations.
pub fn calibrate_layers(
    graph: &ModelGraph,
    cal: &CalibrationSet,
    method: Calibrator,
    bits: u32,
) -> Result<LayerwiseScales, EscError> {
    let acts = graph.collect_activations(cal)?;
    let names = graph.quantized_names();
    let results: Vec<Result<f64, CalibError>> = acts
        .par_iter()
        .map(|a| method.calibrate(std::slice::from_ref(a), bits))
        .collect();
    let mut warnings = Vec::new();
    let mut layers = Vec::new();
    let mut betas = Vec::new();
    for ((res, act), name) in results.into_iter().zip(&acts).zip(&names) {
        let beta = match res {
            Ok(b) => b,
            Err(CalibError::Degenerate) => {
                warnings.push(degenerate_warning(name));
                DEGENERATE_BETA
            }
            Err(source) => {
                return Err(EscError::Calibration {
                    layer: name.clone(),
                    source,
                })
            }
        };
        layers.push(LayerReport {
            layer: name.clone(),
            method: method.to_string(),
            beta,
            bits: bits as u8,
            observed_absmax: act.abs_max(),
        });
        betas.push(beta);
    }
    Ok(LayerwiseScales {
        scales: ScaleVector::from_betas(&betas, bits)?,
        layers,
        warnings,
    })
}

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub method: Calibrator,
    pub scales: ScaleVector,
    pub layers: Vec<LayerReport>,
    /// Task error on the calibration samples.
    pub error: f64,
    pub warnings: Vec<String>,
}

/// Calibrates with a baseline method and reports its calibration-set error.
pub fn run_baseline(
    graph: &ModelGraph,
    cal: &CalibrationSet,
    method: Calibrator,
    cfg: &EscConfig,
) -> Result<BaselineResult, EscError> {
    let cal = cal.take(cfg.n)?;
    let config = QuantConfig::new(graph, cfg.weight_bits, cfg.act_bits)?;
    let layerwise = calibrate_layers(graph, &cal, method, cfg.act_bits)?;
    let error = Evaluator::new(graph, &cal, cfg.metric, config)?.evaluate(&layerwise.scales)?;
    Ok(BaselineResult {
        method,
        scales: layerwise.scales,
        layers: layerwise.layers,
        error,
        warnings: layerwise.warnings,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EscResult {
    pub config: EscConfig,
    pub layers: Vec<String>,
    pub init_scales: ScaleVector,
    pub final_scales: ScaleVector,
    /// Final CMA-ES mean, before flooring at [`MULTIPLIER_FLOOR`].
    pub multipliers: Vec<f64>,
    pub fp_error: f64,
    pub init_error: f64,
    pub final_error: f64,
    /// Best sampled multiplier vector and its calibration error; reported
    /// for analysis only.
    pub best_candidate: Option<(Vec<f64>, f64)>,
    pub stage2_ran: bool,
    pub trace: Vec<TraceRecord>,
    pub init_layers: Vec<LayerReport>,
    pub warnings: Vec<String>,
}

/// `S_init ⊙ max(z, ε)`.
pub fn apply_multipliers(init: &ScaleVector, z: &[f64]) -> Result<ScaleVector, ModelError> {
    let scales = init
        .scales()
        .iter()
        .zip(z)
        .map(|(s, m)| s * m.max(MULTIPLIER_FLOOR))
        .collect();
    ScaleVector::new(scales, init.bits() as u32)
}

/// Stage 1 followed by CMA-ES refinement of the scale multipliers.
///
/// Stage 2 is skipped, with a warning, when the budget cannot pay for one
/// generation. The returned `final_error` is the calibration error of
/// `final_scales`, the scales built from the final distribution mean.
pub fn esc_calibrate(
    graph: &ModelGraph,
    cal: &CalibrationSet,
    cfg: &EscConfig,
) -> Result<EscResult, EscError> {
    let cal = cal.take(cfg.n)?;
    let config = QuantConfig::new(graph, cfg.weight_bits, cfg.act_bits)?;
    let init = init_scales_mse(graph, &cal, &config)?;
    let evaluator = Evaluator::new(graph, &cal, cfg.metric, config)?;
    let init_error = evaluator.evaluate(&init.scales)?;
    let mut warnings = init.warnings.clone();

    let dim = graph.num_quantized();
    let lambda = cfg
        .lambda
        .unwrap_or_else(|| cmaes::default_population(dim.max(1)));
    let stage2 = dim > 0 && cfg.budget >= lambda;
    let (final_scales, multipliers, best_candidate, trace) = if stage2 {
        let objective = |z: &[f64]| match apply_multipliers(&init.scales, z) {
            Ok(s) => evaluator.evaluate(&s).unwrap_or(f64::NAN),
            Err(_) => f64::NAN,
        };
        let outcome = cmaes::optimize(
            objective,
            &vec![1.0; dim],
            CmaOptions {
                sigma0: cfg.sigma0,
                budget: Budget::new(cfg.budget),
                seed: cfg.seed,
                lambda: Some(lambda),
            },
        )?;
        (
            apply_multipliers(&init.scales, &outcome.mean)?,
            outcome.mean,
            Some(outcome.best),
            outcome.trace,
        )
    } else {
        let msg = format!(
            "budget {} is smaller than one CMA-ES generation ({lambda}); keeping Stage-1 scales",
            cfg.budget
        );
        warn!("{msg}");
        warnings.push(msg);
        (init.scales.clone(), vec![1.0; dim], None, Vec::new())
    };
    let final_error = evaluator.evaluate(&final_scales)?;

    Ok(EscResult {
        config: *cfg,
        layers: graph.quantized_names(),
        init_scales: init.scales,
        final_scales,
        multipliers,
        fp_error: evaluator.fp_error(),
        init_error,
        final_error,
        best_candidate,
        stage2_ran: stage2,
        trace,
        init_layers: init.layers,
        warnings,
    })
}
