//! Versioned JSON checkpoint: a header, the model config, free-form
//! metadata and named row-major tensors. Floats are written in shortest
//! round-trip form, so load(save(m)) is bit-identical for `f64` and `f32`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::{BiGcnModel, ModelConfig};
use crate::numkernel::Matrix;
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "ctlrp-bigcn";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl<T: Scalar> BiGcnModel<T> {
    pub fn to_checkpoint_json(&self, metadata: &BTreeMap<String, String>) -> Result<String> {
        let tensors = self
            .tensor_names()
            .into_iter()
            .map(|name| {
                let m = self.tensor(name).expect("listed tensor exists");
                TensorRecord {
                    name: name.to_owned(),
                    rows: m.rows(),
                    cols: m.cols(),
                    data: m.data().iter().map(|v| v.to_f64_lossy()).collect(),
                }
            })
            .collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            metadata: metadata.clone(),
            tensors,
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Parses a checkpoint; returns the model and its metadata.
    pub fn from_checkpoint_json(text: &str) -> Result<(Self, BTreeMap<String, String>)> {
        let file: CheckpointFile = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unexpected format tag {:?}",
                file.format
            )));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (this build reads {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        let mut model = Self::new(file.config)?;
        let expected = model.tensor_names();
        if file.tensors.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                file.tensors.len()
            )));
        }
        for rec in file.tensors {
            let slot = model
                .tensor_mut(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {:?}", rec.name)))?;
            if slot.shape() != (rec.rows, rec.cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} is {}x{}, model expects {:?}",
                    rec.name,
                    rec.rows,
                    rec.cols,
                    slot.shape()
                )));
            }
            *slot = Matrix::new(
                rec.rows,
                rec.cols,
                rec.data.into_iter().map(T::of).collect(),
            )
            .map_err(|e| Error::Checkpoint(format!("tensor {:?}: {e}", rec.name)))?;
        }
        Ok((model, file.metadata))
    }

    pub fn save(&self, path: &Path, metadata: &BTreeMap<String, String>) -> Result<()> {
        fsutil::write_atomic(path, self.to_checkpoint_json(metadata)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        Self::from_checkpoint_json(&fsutil::read_to_string(path)?)
    }
}
