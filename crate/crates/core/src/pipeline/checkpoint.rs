//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `RVOSCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every tensor as
//! little-endian `f64` values in header order. Saving the same state twice
//! produces identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::CheckpointError;
use crate::params::ParamStore;

use super::config::RunConfig;
use super::optim::{Optimizer, OptimizerMeta, Slot};
use super::StepRecord;

const MAGIC: &[u8; 8] = b"RVOSCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Model,
    Segmenter,
    OptFirst,
    OptSecond,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    group: Group,
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    config: String,
    seed: u64,
    epoch: usize,
    step: usize,
    optimizer: OptimizerMeta,
    tensors: Vec<TensorEntry>,
    history: Vec<StepRecord>,
}

/// Everything needed to evaluate a model or resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub model: ParamStore,
    pub segmenter: ParamStore,
    pub optimizer: Optimizer,
    pub history: Vec<StepRecord>,
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut data: Vec<&Mat> = Vec::new();
        for (group, store) in [(Group::Model, &self.model), (Group::Segmenter, &self.segmenter)] {
            for (_, p) in store.iter() {
                tensors.push(TensorEntry {
                    group,
                    name: p.name.clone(),
                    rows: p.value.nrows(),
                    cols: p.value.ncols(),
                    trainable: p.trainable,
                });
                data.push(&p.value);
            }
        }
        for slot in &self.optimizer.slots {
            let mut push = |group, m: &'_ Mat| {
                tensors.push(TensorEntry {
                    group,
                    name: slot.name.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                    trainable: true,
                });
            };
            push(Group::OptFirst, &slot.first);
            if let Some(s) = &slot.second {
                push(Group::OptSecond, s);
            }
        }
        for slot in &self.optimizer.slots {
            data.push(&slot.first);
            if let Some(s) = &slot.second {
                data.push(s);
            }
        }
        let header = Header {
            config_hash: self.config.hash(),
            config: self.config.canonical(),
            seed: self.config.seed,
            epoch: self.epoch,
            step: self.step,
            optimizer: self.optimizer.meta(),
            tensors,
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for m in data {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(len))
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let config = RunConfig::from_toml(&header.config)
            .map_err(|e| corrupt(format!("bad embedded config: {e}")))?;
        if config.hash() != header.config_hash {
            return Err(corrupt("config hash does not match embedded config"));
        }

        let mut cursor = 20 + len;
        let mut read = |rows: usize, cols: usize| -> Result<Mat, CheckpointError> {
            let n = rows * cols;
            let end = cursor + 8 * n;
            let raw = bytes.get(cursor..end).ok_or_else(|| corrupt("truncated tensor data"))?;
            cursor = end;
            let vals = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok(Mat::from_shape_vec((rows, cols), vals).expect("shape"))
        };

        let mut model = ParamStore::new();
        let mut segmenter = ParamStore::new();
        let mut firsts = Vec::new();
        let mut seconds = Vec::new();
        for t in &header.tensors {
            if matches!(t.group, Group::OptFirst | Group::OptSecond) {
                continue;
            }
            let m = read(t.rows, t.cols)?;
            match t.group {
                Group::Model => model.add(t.name.clone(), m, t.trainable),
                Group::Segmenter => segmenter.add(t.name.clone(), m, t.trainable),
                _ => unreachable!(),
            };
        }
        for t in &header.tensors {
            match t.group {
                Group::OptFirst => firsts.push((t.name.clone(), read(t.rows, t.cols)?)),
                Group::OptSecond => seconds.push(read(t.rows, t.cols)?),
                _ => {}
            }
        }
        drop(read);
        if cursor != bytes.len() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        if !seconds.is_empty() && seconds.len() != firsts.len() {
            return Err(corrupt("optimizer moment count mismatch"));
        }
        let mut seconds = seconds.into_iter();
        let slots = firsts
            .into_iter()
            .map(|(name, first)| Slot {
                name,
                first,
                second: seconds.next(),
            })
            .collect();
        let optimizer = Optimizer {
            kind: header.optimizer.kind,
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            grad_clip: config.grad_clip,
            updates: header.optimizer.updates,
            slots,
        };
        Ok(Self {
            config,
            epoch: header.epoch,
            step: header.step,
            model,
            segmenter,
            optimizer,
            history: header.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
