//! JSON model manifests referencing `QCT1` weight files.
//!
//! ```json
//! {"input_shape": [16],
//!  "layers": [{"kind": "Linear", "name": "fc1", "hyper": {},
//!              "weights": {"W": "weights/fc1.W.qct", "b": "weights/fc1.b.qct"}}]}
//! ```
//!
//! Conv1d reads `kernel_size`, `stride` and `padding` from `hyper`;
//! LayerNorm reads `eps` and stores `gamma` under `W` and `beta` under `b`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Layer, LayerKind, ModelError, ModelGraph, Op};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub kind: String,
    pub name: String,
    #[serde(default)]
    pub hyper: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub weights: BTreeMap<String, String>,
}

fn hyper_usize(e: &LayerEntry, key: &str, default: Option<usize>) -> Result<usize, ModelError> {
    match e.hyper.get(key) {
        Some(v) => v
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| ModelError::Shape {
                layer: e.name.clone(),
                reason: format!("hyperparameter '{key}' must be a non-negative integer"),
            }),
        None => default.ok_or_else(|| ModelError::MissingHyper {
            layer: e.name.clone(),
            key: key.into(),
        }),
    }
}

impl ModelGraph {
    /// Loads and validates a model manifest; weight paths are relative to
    /// the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let manifest: ModelManifest =
            serde_json::from_str(&text).map_err(|source| ModelError::Json {
                path: path.display().to_string(),
                source,
            })?;
        Self::from_manifest(&manifest, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_manifest(manifest: &ModelManifest, base: &Path) -> Result<Self, ModelError> {
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for e in &manifest.layers {
            let kind = LayerKind::parse(&e.kind).ok_or_else(|| ModelError::UnknownKind {
                layer: e.name.clone(),
                kind: e.kind.clone(),
            })?;
            let load = |key: &str| -> Result<Option<Tensor>, ModelError> {
                e.weights
                    .get(key)
                    .map(|rel| Tensor::read_qct(base.join(rel)).map_err(ModelError::from))
                    .transpose()
            };
            let require = |key: &str| -> Result<Tensor, ModelError> {
                load(key)?.ok_or_else(|| ModelError::MissingWeight {
                    layer: e.name.clone(),
                    key: key.into(),
                })
            };
            let op = match kind {
                LayerKind::Linear => Op::Linear {
                    weight: require("W")?,
                    bias: load("b")?,
                },
                LayerKind::Conv1d => {
                    let weight = require("W")?;
                    let kernel = hyper_usize(e, "kernel_size", weight.shape().get(2).copied())?;
                    if weight.shape().get(2) != Some(&kernel) {
                        return Err(ModelError::Shape {
                            layer: e.name.clone(),
                            reason: format!(
                                "kernel_size {kernel} disagrees with weight shape {:?}",
                                weight.shape()
                            ),
                        });
                    }
                    Op::Conv1d {
                        weight,
                        bias: load("b")?,
                        stride: hyper_usize(e, "stride", Some(1))?,
                        padding: hyper_usize(e, "padding", Some(0))?,
                    }
                }
                LayerKind::LayerNorm => {
                    let gamma = require("W")?;
                    let beta = match load("b")? {
                        Some(b) => b,
                        None => Tensor::zeros(gamma.shape().to_vec())?,
                    };
                    let eps = match e.hyper.get("eps") {
                        Some(v) => v.as_f64().ok_or_else(|| ModelError::Shape {
                            layer: e.name.clone(),
                            reason: "hyperparameter 'eps' must be a number".into(),
                        })?,
                        None => 1e-5,
                    };
                    Op::LayerNorm { gamma, beta, eps }
                }
                LayerKind::Relu => Op::Relu,
                LayerKind::Gelu => Op::Gelu,
            };
            layers.push(Layer::new(e.name.clone(), op));
        }
        ModelGraph::new(manifest.input_shape.clone(), layers)
    }

    /// Manifest describing this graph, with weights under `weights/`.
    pub fn to_manifest(&self) -> ModelManifest {
        let layers = self
            .layers()
            .iter()
            .map(|l| {
                let mut hyper = BTreeMap::new();
                let mut weights = BTreeMap::new();
                let mut file = |key: &str| {
                    weights.insert(key.to_string(), format!("weights/{}.{key}.qct", l.name));
                };
                match &l.op {
                    Op::Linear { bias, .. } => {
                        file("W");
                        if bias.is_some() {
                            file("b");
                        }
                    }
                    Op::Conv1d {
                        weight,
                        bias,
                        stride,
                        padding,
                    } => {
                        file("W");
                        if bias.is_some() {
                            file("b");
                        }
                        hyper.insert("kernel_size".into(), weight.shape()[2].into());
                        hyper.insert("stride".into(), (*stride).into());
                        hyper.insert("padding".into(), (*padding).into());
                    }
                    Op::LayerNorm { eps, .. } => {
                        file("W");
                        file("b");
                        hyper.insert("eps".into(), (*eps).into());
                    }
                    Op::Relu | Op::Gelu => {}
                }
                LayerEntry {
                    kind: l.kind().as_str().to_string(),
                    name: l.name.clone(),
                    hyper,
                    weights,
                }
            })
            .collect();
        ModelManifest {
            input_shape: self.input_shape().to_vec(),
            layers,
        }
    }

    /// Writes the manifest to `path` and weight files next to it. Weights
    /// are stored as `f32`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<PathBuf, ModelError> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let io_err = |p: &Path| {
            let p = p.display().to_string();
            move |source| ModelError::Io { path: p, source }
        };
        let wdir = base.join("weights");
        fs::create_dir_all(&wdir).map_err(io_err(&wdir))?;
        let manifest = self.to_manifest();
        for (l, e) in self.layers().iter().zip(&manifest.layers) {
            let tensors: Vec<(&str, &Tensor)> = match &l.op {
                Op::Linear { weight, bias } | Op::Conv1d { weight, bias, .. } => {
                    std::iter::once(("W", weight))
                        .chain(bias.as_ref().map(|b| ("b", b)))
                        .collect()
                }
                Op::LayerNorm { gamma, beta, .. } => vec![("W", gamma), ("b", beta)],
                Op::Relu | Op::Gelu => vec![],
            };
            for (key, t) in tensors {
                t.write_qct(base.join(&e.weights[key]))?;
            }
        }
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(io_err(path))?;
        Ok(path.to_path_buf())
    }
}
