//! Self-describing reports for calibration runs and method comparisons.
//!
//! Every report embeds a [`RunManifest`] holding the exact argument vector
//! that produced it, so re-running that command reproduces the report byte
//! for byte. Wall-clock time is logged rather than stored for that reason.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calib::{Calibrator, DEFAULT_PERCENTILES};
use crate::dataset::CalibrationSet;
use crate::esc::{self, EscConfig, EscError, EscResult, Evaluator, LayerReport};
use crate::model::{ModelGraph, QuantConfig, ScaleVector};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Bit-widths evaluated in the reference experiments.
pub const REFERENCE_BITS: [u32; 2] = [4, 8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    pub config: EscConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>, config: EscConfig) -> Self {
        Self {
            command: command.to_string(),
            argv,
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            seed: config.seed,
            version: TOOL_VERSION.to_string(),
        }
    }
}

/// A calibration method as named on the command line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Baseline(Calibrator),
    Esc,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Baseline(c) => c.fmt(f),
            Method::Esc => f.write_str("esc"),
        }
    }
}

/// Method family accepted by `--method`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    Max,
    Percentile,
    Entropy,
    Mse,
    Esc,
}

impl FromStr for MethodKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(Self::Max),
            "percentile" => Ok(Self::Percentile),
            "entropy" => Ok(Self::Entropy),
            "mse" => Ok(Self::Mse),
            "esc" => Ok(Self::Esc),
            _ => Err(format!(
                "unknown method '{s}' (expected max, percentile, entropy, mse or esc)"
            )),
        }
    }
}

impl MethodKind {
    /// Concrete methods to run. Percentile without an explicit value
    /// expands to the three default percentiles.
    pub fn expand(self, percentile: Option<f64>) -> Vec<Method> {
        match self {
            MethodKind::Max => vec![Method::Baseline(Calibrator::Max)],
            MethodKind::Percentile => match percentile {
                Some(p) => vec![Method::Baseline(Calibrator::Percentile { percentile: p })],
                None => DEFAULT_PERCENTILES
                    .iter()
                    .map(|&p| Method::Baseline(Calibrator::Percentile { percentile: p }))
                    .collect(),
            },
            MethodKind::Entropy => vec![Method::Baseline(Calibrator::Entropy)],
            MethodKind::Mse => vec![Method::Baseline(Calibrator::Mse)],
            MethodKind::Esc => vec![Method::Esc],
        }
    }
}

/// All methods compared by [`compare`].
pub fn all_methods(percentile: Option<f64>) -> Vec<Method> {
    [
        MethodKind::Max,
        MethodKind::Percentile,
        MethodKind::Entropy,
        MethodKind::Mse,
        MethodKind::Esc,
    ]
    .into_iter()
    .flat_map(|k| k.expand(percentile))
    .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodReport {
    pub method: String,
    pub scales: ScaleVector,
    pub layers: Vec<LayerReport>,
    pub calibration_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_error: Option<f64>,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub esc: Option<EscResult>,
}

/// Task error on the evaluation set, with the quantization config fixed
/// once for every method.
pub struct EvalHarness<'a> {
    evaluator: Evaluator<'a>,
}

impl<'a> EvalHarness<'a> {
    pub fn new(
        graph: &'a ModelGraph,
        eval: &'a CalibrationSet,
        cfg: &EscConfig,
    ) -> Result<Self, EscError> {
        let config = QuantConfig::new(graph, cfg.weight_bits, cfg.act_bits)?;
        Ok(Self {
            evaluator: Evaluator::new(graph, eval, cfg.metric, config)?,
        })
    }

    pub fn fp_error(&self) -> f64 {
        self.evaluator.fp_error()
    }

    pub fn evaluate(&self, scales: &ScaleVector) -> Result<f64, EscError> {
        self.evaluator.evaluate(scales)
    }
}

pub fn run_method(
    graph: &ModelGraph,
    cal: &CalibrationSet,
    eval: Option<&EvalHarness<'_>>,
    method: Method,
    cfg: &EscConfig,
) -> Result<MethodReport, EscError> {
    let (scales, layers, calibration_error, warnings, esc) = match method {
        Method::Baseline(c) => {
            let r = esc::run_baseline(graph, cal, c, cfg)?;
            (r.scales, r.layers, r.error, r.warnings, None)
        }
        Method::Esc => {
            let r = esc::esc_calibrate(graph, cal, cfg)?;
            let layers = r
                .init_layers
                .iter()
                .zip(r.final_scales.betas())
                .map(|(l, beta)| LayerReport {
                    method: "esc".into(),
                    beta,
                    ..l.clone()
                })
                .collect();
            (
                r.final_scales.clone(),
                layers,
                r.final_error,
                r.warnings.clone(),
                Some(r),
            )
        }
    };
    let eval_error = eval.map(|h| h.evaluate(&scales)).transpose()?;
    Ok(MethodReport {
        method: method.to_string(),
        scales,
        layers,
        calibration_error,
        eval_error,
        warnings,
        esc,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrateReport {
    pub manifest: RunManifest,
    pub non_reference_bits: bool,
    pub fp_calibration_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fp_eval_error: Option<f64>,
    pub methods: Vec<MethodReport>,
}

fn fp_calibration_error(
    graph: &ModelGraph,
    cal: &CalibrationSet,
    cfg: &EscConfig,
) -> Result<f64, EscError> {
    let cal = cal.take(cfg.n)?;
    Ok(EvalHarness::new(graph, &cal, cfg)?.fp_error())
}

/// Runs each of `methods`, failing on the first error.
pub fn calibrate(
    manifest: RunManifest,
    graph: &ModelGraph,
    cal: &CalibrationSet,
    eval: Option<&CalibrationSet>,
    methods: &[Method],
) -> Result<CalibrateReport, EscError> {
    let cfg = manifest.config;
    let harness = eval.map(|e| EvalHarness::new(graph, e, &cfg)).transpose()?;
    let reports = methods
        .iter()
        .map(|&m| run_method(graph, cal, harness.as_ref(), m, &cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CalibrateReport {
        manifest,
        non_reference_bits: !REFERENCE_BITS.contains(&cfg.act_bits)
            || !REFERENCE_BITS.contains(&cfg.weight_bits),
        fp_calibration_error: fp_calibration_error(graph, cal, &cfg)?,
        fp_eval_error: harness.as_ref().map(EvalHarness::fp_error),
        methods: reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    /// 1-based position by evaluation error; absent for failed methods.
    pub rank: Option<usize>,
    pub method: String,
    pub eval_error: Option<f64>,
    pub relative_to_fp: Option<f64>,
    pub calibration_error: Option<f64>,
    pub status: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub manifest: RunManifest,
    pub non_reference_bits: bool,
    pub fp_eval_error: f64,
    pub rows: Vec<CompareRow>,
    pub methods: Vec<MethodReport>,
}

/// Runs every method and ranks them by evaluation error. A failing method
/// becomes a row with status `error`; the others still run.
pub fn compare(
    manifest: RunManifest,
    graph: &ModelGraph,
    cal: &CalibrationSet,
    eval: &CalibrationSet,
    methods: &[Method],
) -> Result<CompareReport, EscError> {
    let cfg = manifest.config;
    let harness = EvalHarness::new(graph, eval, &cfg)?;
    let fp = harness.fp_error();
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &m in methods {
        match run_method(graph, cal, Some(&harness), m, &cfg) {
            Ok(r) => {
                let e = r.eval_error.expect("evaluated");
                rows.push(CompareRow {
                    rank: None,
                    method: r.method.clone(),
                    eval_error: Some(e),
                    relative_to_fp: (fp > 0.0).then(|| e / fp),
                    calibration_error: Some(r.calibration_error),
                    status: "ok".into(),
                    message: r.warnings.join("; "),
                });
                reports.push(r);
            }
            Err(e) => rows.push(CompareRow {
                rank: None,
                method: m.to_string(),
                eval_error: None,
                relative_to_fp: None,
                calibration_error: None,
                status: "error".into(),
                message: e.to_string(),
            }),
        }
    }
    // stable: equal errors keep method order, failures go last
    rows.sort_by(|a, b| match (a.eval_error, b.eval_error) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    for (i, row) in rows
        .iter_mut()
        .filter(|r| r.eval_error.is_some())
        .enumerate()
    {
        row.rank = Some(i + 1);
    }
    Ok(CompareReport {
        manifest,
        non_reference_bits: !REFERENCE_BITS.contains(&cfg.act_bits)
            || !REFERENCE_BITS.contains(&cfg.weight_bits),
        fp_eval_error: fp,
        rows,
        methods: reports,
    })
}

impl CompareReport {
    /// The ranked table as CSV.
    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Serializes with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}
