//! Versioned checkpoint container: magic, format version, a JSON header with
//! the tensor manifest, then little-endian f32 blobs in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{build_uninit, ModelConfig, ModelGraph};
use crate::optim::{RmsProp, RmsPropConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EEDETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Where a run stopped, enough to continue it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingState {
    /// Epochs completed.
    pub epoch: usize,
    pub seed: u64,
    pub optimizer: RmsPropConfig,
    pub optimizer_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub training: Option<TrainingState>,
    /// Exit threshold selected on validation data.
    pub tau: Option<f64>,
    /// Resolved run configuration that produced the checkpoint.
    pub run_config: Option<serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

const OPT_PREFIX: &str = "opt/";

impl Checkpoint {
    /// Parameters and buffers of every layer, then optimizer moments.
    pub fn from_model(
        model: &ModelGraph,
        optimizer: Option<(&RmsProp, TrainingState)>,
        tau: Option<f64>,
        run_config: Option<serde_json::Value>,
    ) -> Self {
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        for (l, _) in model.layers() {
            for (i, p) in l.params.iter().enumerate() {
                entries.push(TensorEntry {
                    name: format!("{}/param{i}", l.name),
                    shape: p.shape().to_vec(),
                });
                tensors.push(without_grad(p));
            }
            for (i, b) in l.buffers.iter().enumerate() {
                entries.push(TensorEntry {
                    name: format!("{}/buffer{i}", l.name),
                    shape: b.shape().to_vec(),
                });
                tensors.push(b.clone());
            }
        }
        let training = optimizer.map(|(opt, state)| {
            for ((l, _), avgs) in model.layers().iter().zip(&opt.square_avg) {
                for (i, v) in avgs.iter().enumerate() {
                    entries.push(TensorEntry {
                        name: format!("{OPT_PREFIX}{}/param{i}", l.name),
                        shape: v.shape().to_vec(),
                    });
                    tensors.push(v.clone());
                }
            }
            state
        });
        Self {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                model: model.config.clone(),
                training,
                tau,
                run_config,
                tensors: entries,
            },
            tensors,
        }
    }

    fn lookup(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let i = self
            .header
            .tensors
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("tensor {name} missing")))?;
        if self.header.tensors[i].shape != shape {
            return Err(Error::Shape {
                layer: name.to_string(),
                expected: shape.to_vec(),
                actual: self.header.tensors[i].shape.clone(),
            });
        }
        Ok(&self.tensors[i])
    }

    pub fn to_model(&self) -> Result<ModelGraph> {
        let mut model = build_uninit(&self.header.model)?;
        let mut err = None;
        model.for_each_layer_mut(|l, _| {
            let name = l.name.clone();
            for (i, p) in l.params.iter_mut().enumerate() {
                match self.lookup(&format!("{name}/param{i}"), p.shape()) {
                    Ok(t) => p.data_mut().copy_from_slice(t.data()),
                    Err(e) => err = err.take().or(Some(e)),
                }
            }
            for (i, b) in l.buffers.iter_mut().enumerate() {
                match self.lookup(&format!("{name}/buffer{i}"), b.shape()) {
                    Ok(t) => b.data_mut().copy_from_slice(t.data()),
                    Err(e) => err = err.take().or(Some(e)),
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }

    /// Optimizer state for `model`, when the checkpoint carries one.
    pub fn optimizer(&self, model: &ModelGraph) -> Result<Option<RmsProp>> {
        let Some(state) = &self.header.training else {
            return Ok(None);
        };
        let mut opt = RmsProp::new(model, state.optimizer);
        opt.steps = state.optimizer_steps;
        for ((l, _), avgs) in model.layers().iter().zip(opt.square_avg.iter_mut()) {
            for (i, v) in avgs.iter_mut().enumerate() {
                let t = self.lookup(&format!("{OPT_PREFIX}{}/param{i}", l.name), v.shape())?;
                v.data_mut().copy_from_slice(t.data());
            }
        }
        Ok(Some(opt))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        write_container(
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            &serde_json::to_vec(&self.header)?,
            |out| {
                for t in &self.tensors {
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            },
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header_bytes, mut body) = read_container(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if body.len() < 4 * n {
                return Err(Error::Format(format!("blob for {} truncated", e.name)));
            }
            let data = body[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            body = &body[4 * n..];
            tensors.push(Tensor::new(e.shape.clone(), data)?);
        }
        if !body.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after blobs",
                body.len()
            )));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn without_grad(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("same shape")
}

/// `magic | version u32 | header length u64 | header | body`, little endian.
pub(crate) fn write_container(
    magic: &[u8; 8],
    version: u32,
    header: &[u8],
    body: impl FnOnce(&mut Vec<u8>),
) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(header.len() + 64);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    body(&mut out);
    Ok(out)
}

pub(crate) fn read_container<'a>(
    bytes: &'a [u8],
    magic: &[u8; 8],
    version: u32,
) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 20 || &bytes[..8] != magic {
        return Err(Error::Format("bad magic".into()));
    }
    let v = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if v != version {
        return Err(Error::Format(format!("unsupported version {v}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 20 + len {
        return Err(Error::Format("header truncated".into()));
    }
    Ok((&bytes[20..20 + len], &bytes[20 + len..]))
}

/// SHA-256 over every parameter and buffer, in layer order.
pub fn model_hash(model: &ModelGraph) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&model.config).unwrap_or_default());
    for (l, _) in model.layers() {
        for t in l.params.iter().chain(&l.buffers) {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}
