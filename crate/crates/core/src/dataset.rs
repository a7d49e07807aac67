//! Calibration and evaluation sample sets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("sample set is empty")]
    Empty,
    #[error("{what} {index} has shape {actual:?}, expected {expected:?}")]
    Shape {
        what: &'static str,
        index: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{targets} targets for {inputs} inputs")]
    TargetCount { inputs: usize, targets: usize },
    #[error("requested {requested} samples but the set holds {available}")]
    NotEnoughSamples { requested: usize, available: usize },
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
}

/// On-disk listing of sample tensor files, relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetManifest {
    pub inputs: Vec<String>,
    #[serde(default)]
    pub targets: Vec<String>,
}

/// `n` input tensors with optional matching targets.
///
/// Targets may be absent when only output-matching metrics are used.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    inputs: Vec<Tensor>,
    targets: Vec<Tensor>,
}

fn check_shapes(what: &'static str, tensors: &[Tensor]) -> Result<(), DatasetError> {
    if let Some(first) = tensors.first() {
        for (index, t) in tensors.iter().enumerate() {
            if t.shape() != first.shape() {
                return Err(DatasetError::Shape {
                    what,
                    index,
                    expected: first.shape().to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
        }
    }
    Ok(())
}

impl CalibrationSet {
    pub fn new(inputs: Vec<Tensor>, targets: Vec<Tensor>) -> Result<Self, DatasetError> {
        if inputs.is_empty() {
            return Err(DatasetError::Empty);
        }
        if !targets.is_empty() && targets.len() != inputs.len() {
            return Err(DatasetError::TargetCount {
                inputs: inputs.len(),
                targets: targets.len(),
            });
        }
        check_shapes("input", &inputs)?;
        check_shapes("target", &targets)?;
        Ok(Self { inputs, targets })
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    pub fn targets(&self) -> Option<&[Tensor]> {
        if self.targets.is_empty() {
            None
        } else {
            Some(&self.targets)
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Self, DatasetError> {
        if n == 0 {
            return Err(DatasetError::Empty);
        }
        if n > self.len() {
            return Err(DatasetError::NotEnoughSamples {
                requested: n,
                available: self.len(),
            });
        }
        Ok(Self {
            inputs: self.inputs[..n].to_vec(),
            targets: self.targets.iter().take(n).cloned().collect(),
        })
    }

    pub fn load(manifest: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let manifest = manifest.as_ref();
        let text = fs::read_to_string(manifest).map_err(|source| DatasetError::Io {
            path: manifest.display().to_string(),
            source,
        })?;
        let listing: SetManifest =
            serde_json::from_str(&text).map_err(|source| DatasetError::Json {
                path: manifest.display().to_string(),
                source,
            })?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let read = |paths: &[String]| -> Result<Vec<Tensor>, DatasetError> {
            paths
                .iter()
                .map(|p| Tensor::read_qct(base.join(p)).map_err(DatasetError::from))
                .collect()
        };
        Self::new(read(&listing.inputs)?, read(&listing.targets)?)
    }

    /// Writes every sample under `dir/<prefix>/` and a manifest at
    /// `dir/<prefix>.json`, returning the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<PathBuf, DatasetError> {
        let dir = dir.as_ref();
        let sample_dir = dir.join(prefix);
        fs::create_dir_all(&sample_dir).map_err(|source| DatasetError::Io {
            path: sample_dir.display().to_string(),
            source,
        })?;
        let mut listing = SetManifest {
            inputs: Vec::new(),
            targets: Vec::new(),
        };
        for (i, x) in self.inputs.iter().enumerate() {
            let rel = format!("{prefix}/x{i:04}.qct");
            x.write_qct(dir.join(&rel))?;
            listing.inputs.push(rel);
        }
        for (i, y) in self.targets.iter().enumerate() {
            let rel = format!("{prefix}/y{i:04}.qct");
            y.write_qct(dir.join(&rel))?;
            listing.targets.push(rel);
        }
        let path = dir.join(format!("{prefix}.json"));
        let text = serde_json::to_string_pretty(&listing).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(path)
    }
}
