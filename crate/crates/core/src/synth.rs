//! Deterministic synthetic tasks with teacher-generated targets.
//!
//! * `regression_heavytail`: a token-wise MLP over `[16, 16]` inputs. The
//!   hidden representation is redundant (low-rank), and one hidden channel
//!   is a gated spike channel that fires on a few tokens with a magnitude
//!   100× the typical hidden activation. Targets are the teacher output
//!   plus Gaussian noise.
//! * `classification_toy`: a small Conv1d network over `[2, 32]` inputs
//!   whose labels are its own argmax, stored as one-hot targets.
//!
//! Every stored value is rounded through `f32` so that the in-memory
//! artifacts equal what `QCT1` files load back.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CalibrationSet, DatasetError};
use crate::esc::{argmax, ErrorMetric};
use crate::model::{Layer, ModelError, ModelGraph, Op};
use crate::tensor::Tensor;

pub const CALIBRATION_SAMPLES: usize = 100;
pub const EVAL_SAMPLES: usize = 200;

/// Spike magnitude relative to the RMS of the other hidden channels.
pub const OUTLIER_RATIO: f64 = 100.0;

const TOKENS: usize = 16;
const FEATURES: usize = 16;
const HIDDEN: usize = 128;
const LATENT: usize = 4;
const OUTPUTS: usize = 8;
const SPIKE_CHANNEL: usize = 0;
/// The spike gate opens this many standard deviations above zero.
const GATE_SIGMAS: f64 = 4.0;
/// Every `TRANSIENT_PERIOD`-th sample, offset by `TRANSIENT_PHASE`, carries
/// one transient token.
const TRANSIENT_PERIOD: usize = 25;
const TRANSIENT_PHASE: usize = 7;
/// Target noise variance as a fraction of the teacher output variance.
const NOISE_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    RegressionHeavytail,
    ClassificationToy,
}

impl SynthTask {
    pub fn as_str(&self) -> &'static str {
        match self {
            SynthTask::RegressionHeavytail => "regression_heavytail",
            SynthTask::ClassificationToy => "classification_toy",
        }
    }

    /// Metric the task is scored with.
    pub fn metric(&self) -> ErrorMetric {
        match self {
            SynthTask::RegressionHeavytail => ErrorMetric::MseVsTarget,
            SynthTask::ClassificationToy => ErrorMetric::ClassificationError,
        }
    }
}

impl fmt::Display for SynthTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SynthTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regression_heavytail" => Ok(SynthTask::RegressionHeavytail),
            "classification_toy" => Ok(SynthTask::ClassificationToy),
            _ => Err(format!(
                "unknown task '{s}' (expected regression_heavytail or classification_toy)"
            )),
        }
    }
}

/// Generated model plus calibration and evaluation sets.
#[derive(Debug, Clone)]
pub struct SynthArtifacts {
    pub task: SynthTask,
    pub model: ModelGraph,
    pub calibration: CalibrationSet,
    pub evaluation: CalibrationSet,
}

/// Paths written by [`SynthArtifacts::write`].
#[derive(Debug, Clone, Serialize)]
pub struct SynthPaths {
    pub model: PathBuf,
    pub calibration: PathBuf,
    pub evaluation: PathBuf,
}

impl SynthArtifacts {
    pub fn metric(&self) -> ErrorMetric {
        self.task.metric()
    }

    /// Writes `model.json`, `calib.json` and `eval.json` (plus tensor files)
    /// into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<SynthPaths, SynthError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| SynthError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(SynthPaths {
            model: self.model.save(dir.join("model.json"))?,
            calibration: self.calibration.save(dir, "calib")?,
            evaluation: self.evaluation.save(dir, "eval")?,
        })
    }
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    fn normals(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| f32_round(self.normal() * std)).collect()
    }

    fn tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), self.normals(n, std)).expect("finite normals")
    }
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data.into_iter().map(f32_round).collect()).expect("finite values")
}

fn linear(name: &str, weight: Tensor, bias: Tensor) -> Layer {
    Layer::new(
        name,
        Op::Linear {
            weight,
            bias: Some(bias),
        },
    )
}

pub fn synthesize(task: SynthTask, seed: u64) -> Result<SynthArtifacts, SynthError> {
    let mut gen = Gen(ChaCha8Rng::seed_from_u64(seed));
    match task {
        SynthTask::RegressionHeavytail => regression_heavytail(&mut gen),
        SynthTask::ClassificationToy => classification_toy(&mut gen),
    }
}

/// Per-token output rows of `layers` applied to `inputs`.
fn token_rows(layers: &[Layer], inputs: &[Tensor]) -> Result<Vec<Vec<f64>>, ModelError> {
    let graph = ModelGraph::new(inputs[0].shape().to_vec(), layers.to_vec())?;
    let mut rows = Vec::new();
    for x in inputs {
        let (y, _) = graph.forward_fp(x)?;
        let width = *y.shape().last().expect("rank >= 1");
        rows.extend(y.data().chunks(width).map(<[f64]>::to_vec));
    }
    Ok(rows)
}

/// Per-coordinate mean and standard deviation of `rows` projected by `proj`.
fn projected_stats(proj: &[Vec<f64>], rows: &[Vec<f64>]) -> Vec<(f64, f64)> {
    proj.iter()
        .map(|p| {
            let vals: Vec<f64> = rows
                .iter()
                .map(|r| p.iter().zip(r).map(|(a, b)| a * b).sum())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            (mean, var.sqrt().max(1e-12))
        })
        .collect()
}

/// Dense `[rows, cols]` weight reading `LATENT` normalized projections and
/// expanding them with `expand` (`rows × LATENT`).
fn low_rank(
    expand: &[f64],
    proj: &[Vec<f64>],
    stats: &[(f64, f64)],
    rows: usize,
) -> (Vec<f64>, Vec<f64>) {
    let cols = proj[0].len();
    let mut w = vec![0.0; rows * cols];
    let mut b = vec![0.0; rows];
    for o in 0..rows {
        for (r, (p, &(mean, std))) in proj.iter().zip(stats).enumerate() {
            let e = expand[o * LATENT + r];
            for (i, pi) in p.iter().enumerate() {
                w[o * cols + i] += e * pi / std;
            }
            b[o] -= e * mean / std;
        }
    }
    (w, b)
}

fn regression_heavytail(gen: &mut Gen) -> Result<SynthArtifacts, SynthError> {
    let pattern: Vec<f64> = (0..FEATURES)
        .map(|_| if gen.0.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();

    // fc1: rank-LATENT features of the input, plus the gated spike row.
    let mut project1 = gen.normals(LATENT * FEATURES, 1.0 / (FEATURES as f64).sqrt());
    // regular channels do not see the transient pattern
    for row in project1.chunks_mut(FEATURES) {
        let along = row.iter().zip(&pattern).map(|(a, b)| a * b).sum::<f64>() / FEATURES as f64;
        row.iter_mut()
            .zip(&pattern)
            .for_each(|(a, b)| *a -= along * b);
    }
    let expand1 = gen.normals(HIDDEN * LATENT, 1.0 / (LATENT as f64).sqrt());
    let mut w1 = vec![0.0; HIDDEN * FEATURES];
    for o in 0..HIDDEN {
        for i in 0..FEATURES {
            w1[o * FEATURES + i] = (0..LATENT)
                .map(|r| expand1[o * LATENT + r] * project1[r * FEATURES + i])
                .sum();
        }
    }
    let mut b1 = gen.normals(HIDDEN, 0.1);
    let row_peak = w1
        .iter()
        .map(|w: &f64| f32_round(*w).abs())
        .fold(0.0, f64::max);
    for i in 0..FEATURES {
        w1[SPIKE_CHANNEL * FEATURES + i] = row_peak * pattern[i];
    }
    // the gate stays shut on ordinary tokens
    let gate = GATE_SIGMAS * row_peak * (FEATURES as f64).sqrt();
    b1[SPIKE_CHANNEL] = -gate;
    let fc1 = linear(
        "fc1",
        tensor(&[HIDDEN, FEATURES], w1),
        tensor(&[HIDDEN], b1),
    );
    let relu1 = Layer::new("relu1", Op::Relu);

    let draw = |gen: &mut Gen, n: usize| -> (Vec<Vec<f64>>, Vec<Option<usize>>) {
        (0..n)
            .map(|i| {
                let x = gen.normals(TOKENS * FEATURES, 1.0);
                let t = gen.0.gen_range(0..TOKENS);
                (x, (i % TRANSIENT_PERIOD == TRANSIENT_PHASE).then_some(t))
            })
            .unzip()
    };
    let (cal_raw, cal_tr) = draw(gen, CALIBRATION_SAMPLES);
    let (eval_raw, eval_tr) = draw(gen, EVAL_SAMPLES);
    let plain = |raw: &[Vec<f64>]| -> Vec<Tensor> {
        raw.iter()
            .map(|x| tensor(&[TOKENS, FEATURES], x.clone()))
            .collect()
    };

    // Transient amplitude: the spike reaches OUTLIER_RATIO × the RMS of the
    // regular hidden channels.
    let hidden = token_rows(&[fc1.clone(), relu1.clone()], &plain(&cal_raw))?;
    let (sq, count) = hidden.iter().fold((0.0, 0usize), |(sq, n), row| {
        let s: f64 = row
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != SPIKE_CHANNEL)
            .map(|(_, v)| v * v)
            .sum();
        (sq + s, n + HIDDEN - 1)
    });
    let rms = (sq / count as f64).sqrt();
    let amplitude = (OUTLIER_RATIO * rms + gate) / (row_peak * FEATURES as f64);
    let with_transients = |raw: &[Vec<f64>], tr: &[Option<usize>]| -> Vec<Tensor> {
        raw.iter()
            .zip(tr)
            .map(|(x, t)| {
                let mut x = x.clone();
                if let Some(t) = *t {
                    for (f, p) in pattern.iter().enumerate() {
                        x[t * FEATURES + f] = amplitude * p;
                    }
                }
                tensor(&[TOKENS, FEATURES], x)
            })
            .collect()
    };
    let cal_inputs = with_transients(&cal_raw, &cal_tr);
    let eval_inputs = with_transients(&eval_raw, &eval_tr);

    // fc2 averages the regular channels back into the latents and re-expands.
    let read2: Vec<Vec<f64>> = (0..LATENT)
        .map(|r| {
            (0..HIDDEN)
                .map(|j| {
                    if j == SPIKE_CHANNEL {
                        0.0
                    } else {
                        expand1[j * LATENT + r] / HIDDEN as f64
                    }
                })
                .collect()
        })
        .collect();
    let stats2 = projected_stats(&read2, &hidden);
    let expand2 = gen.normals(HIDDEN * LATENT, 1.0 / (LATENT as f64).sqrt());
    let (mut w2, b2) = low_rank(&expand2, &read2, &stats2, HIDDEN);
    let w2_std = (w2.iter().map(|w| w * w).sum::<f64>() / w2.len() as f64).sqrt();
    let spike_col = gen.normals(HIDDEN, w2_std / OUTLIER_RATIO);
    for o in 0..HIDDEN {
        w2[o * HIDDEN + SPIKE_CHANNEL] = spike_col[o];
    }
    let fc2 = linear("fc2", tensor(&[HIDDEN, HIDDEN], w2), tensor(&[HIDDEN], b2));
    let gelu2 = Layer::new("gelu2", Op::Gelu);
    let ln_gamma: Vec<f64> = (0..HIDDEN).map(|_| 1.0 + 0.1 * gen.normal()).collect();
    let ln2 = Layer::new(
        "ln2",
        Op::LayerNorm {
            gamma: tensor(&[HIDDEN], ln_gamma),
            beta: gen.tensor(&[HIDDEN], 0.1),
            eps: 1e-5,
        },
    );

    // fc3 reads the latents once more.
    let front = [
        fc1.clone(),
        relu1.clone(),
        fc2.clone(),
        gelu2.clone(),
        ln2.clone(),
    ];
    let normed = token_rows(&front, &plain(&cal_raw))?;
    let read3: Vec<Vec<f64>> = (0..LATENT)
        .map(|r| {
            (0..HIDDEN)
                .map(|j| expand2[j * LATENT + r] / HIDDEN as f64)
                .collect()
        })
        .collect();
    let stats3 = projected_stats(&read3, &normed);
    let readout = gen.normals(OUTPUTS * LATENT, 1.0 / (LATENT as f64).sqrt());
    let (w3, b3) = low_rank(&readout, &read3, &stats3, OUTPUTS);
    let fc3 = linear(
        "fc3",
        tensor(&[OUTPUTS, HIDDEN], w3),
        tensor(&[OUTPUTS], b3),
    );

    let model = ModelGraph::new(
        vec![TOKENS, FEATURES],
        vec![fc1, relu1, fc2, gelu2, ln2, fc3],
    )?;

    let outputs = |xs: &[Tensor]| -> Result<Vec<Tensor>, ModelError> {
        xs.iter()
            .map(|x| model.forward_fp(x).map(|(y, _)| y))
            .collect()
    };
    let cal_out = outputs(&cal_inputs)?;
    let eval_out = outputs(&eval_inputs)?;
    let all: Vec<f64> = cal_out
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len() as f64;
    let noise_std = (NOISE_FRACTION * var).sqrt();
    let mut noisy = |ys: Vec<Tensor>| -> Vec<Tensor> {
        ys.into_iter()
            .map(|y| {
                let data = y
                    .data()
                    .iter()
                    .map(|v| v + noise_std * gen.normal())
                    .collect();
                tensor(y.shape(), data)
            })
            .collect()
    };
    let cal_targets = noisy(cal_out);
    let eval_targets = noisy(eval_out);

    Ok(SynthArtifacts {
        task: SynthTask::RegressionHeavytail,
        model,
        calibration: CalibrationSet::new(cal_inputs, cal_targets)?,
        evaluation: CalibrationSet::new(eval_inputs, eval_targets)?,
    })
}

fn classification_toy(gen: &mut Gen) -> Result<SynthArtifacts, SynthError> {
    const CHANNELS: usize = 2;
    const LENGTH: usize = 32;
    const CLASSES: usize = 4;
    let conv = |gen: &mut Gen,
                name: &str,
                oc: usize,
                ic: usize,
                k: usize,
                stride: usize,
                padding: usize| {
        Layer::new(
            name,
            Op::Conv1d {
                weight: gen.tensor(&[oc, ic, k], 1.0 / ((ic * k) as f64).sqrt()),
                bias: Some(gen.tensor(&[oc], 0.1)),
                stride,
                padding,
            },
        )
    };
    let conv1 = conv(gen, "conv1", 8, CHANNELS, 5, 1, 2);
    let conv2 = conv(gen, "conv2", 8, 8, 3, 2, 1);
    let ln_gamma: Vec<f64> = (0..LENGTH / 2).map(|_| 1.0 + 0.1 * gen.normal()).collect();
    let ln = Layer::new(
        "ln",
        Op::LayerNorm {
            gamma: tensor(&[LENGTH / 2], ln_gamma),
            beta: gen.tensor(&[LENGTH / 2], 0.1),
            eps: 1e-5,
        },
    );
    let conv3 = conv(gen, "conv3", 1, 8, 1, 1, 0);
    let head = linear(
        "head",
        gen.tensor(&[CLASSES, LENGTH / 2], 1.0 / ((LENGTH / 2) as f64).sqrt()),
        gen.tensor(&[CLASSES], 0.1),
    );
    let model = ModelGraph::new(
        vec![CHANNELS, LENGTH],
        vec![
            conv1,
            Layer::new("gelu1", Op::Gelu),
            conv2,
            Layer::new("relu2", Op::Relu),
            ln,
            conv3,
            head,
        ],
    )?;

    let sample = |gen: &mut Gen, n: usize| -> Result<(Vec<Tensor>, Vec<Tensor>), ModelError> {
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            // smooth-ish signals: random walk plus noise
            let mut data = Vec::with_capacity(CHANNELS * LENGTH);
            for _ in 0..CHANNELS {
                let mut level = gen.normal();
                for _ in 0..LENGTH {
                    level = 0.9 * level + 0.45 * gen.normal();
                    data.push(level + 0.1 * gen.0.gen_range(-1.0..1.0));
                }
            }
            let x = tensor(&[CHANNELS, LENGTH], data);
            let (out, _) = model.forward_fp(&x)?;
            let mut onehot = vec![0.0; CLASSES];
            onehot[argmax(out.data())] = 1.0;
            xs.push(x);
            ys.push(tensor(out.shape(), onehot));
        }
        Ok((xs, ys))
    };
    let (cal_x, cal_y) = sample(gen, CALIBRATION_SAMPLES)?;
    let (eval_x, eval_y) = sample(gen, EVAL_SAMPLES)?;
    Ok(SynthArtifacts {
        task: SynthTask::ClassificationToy,
        model,
        calibration: CalibrationSet::new(cal_x, cal_y)?,
        evaluation: CalibrationSet::new(eval_x, eval_y)?,
    })
}
