//! Export container: magic, format version, a JSON header describing the
//! integer graph and its tensors, then int8 weights and little-endian int32
//! biases in op order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{read_container, write_container};
use crate::error::{Error, Result};
use crate::quant::int8::Int8Model;

pub const EXPORT_MAGIC: &[u8; 8] = b"EEDETQ8\0";
pub const EXPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportTensor {
    pub name: String,
    /// `"i8"` or `"i32"`.
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportHeader {
    pub format_version: u32,
    pub graph: Int8Model,
    pub tensors: Vec<ExportTensor>,
}

fn manifest(model: &Int8Model) -> Vec<ExportTensor> {
    let mut v = Vec::new();
    for op in model.ops() {
        if op.weight.is_none() {
            continue;
        }
        v.push(ExportTensor {
            name: format!("{}/weight", op.name),
            dtype: "i8".into(),
            shape: op.op.weight_shape(),
        });
        v.push(ExportTensor {
            name: format!("{}/bias", op.name),
            dtype: "i32".into(),
            shape: vec![op.op.bias_len()],
        });
    }
    v
}

pub fn write_export(model: &Int8Model) -> Result<Vec<u8>> {
    let header = ExportHeader {
        format_version: EXPORT_VERSION,
        graph: model.clone(),
        tensors: manifest(model),
    };
    write_container(
        EXPORT_MAGIC,
        EXPORT_VERSION,
        &serde_json::to_vec(&header)?,
        |out| {
            for op in model.ops() {
                out.extend(op.weights.iter().map(|&w| w as u8));
                for b in &op.bias {
                    out.extend_from_slice(&b.to_le_bytes());
                }
            }
        },
    )
}

pub fn read_export(bytes: &[u8]) -> Result<Int8Model> {
    let (header_bytes, mut body) = read_container(bytes, EXPORT_MAGIC, EXPORT_VERSION)?;
    let header: ExportHeader = serde_json::from_slice(header_bytes)?;
    let mut model = header.graph;
    if manifest(&model) != header.tensors {
        return Err(Error::Format(
            "tensor manifest does not match the graph".into(),
        ));
    }
    for op in model.ops_mut() {
        if op.weight.is_none() {
            continue;
        }
        let nw: usize = op.op.weight_shape().iter().product();
        let nb = op.op.bias_len();
        if body.len() < nw + 4 * nb {
            return Err(Error::Format(format!("blobs for {} truncated", op.name)));
        }
        op.weights = body[..nw].iter().map(|&b| b as i8).collect();
        op.bias = body[nw..nw + 4 * nb]
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        body = &body[nw + 4 * nb..];
    }
    if !body.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after blobs",
            body.len()
        )));
    }
    Ok(model)
}

/// SHA-256 of the serialized container.
pub fn export_hash(model: &Int8Model) -> Result<String> {
    Ok(hex::encode(Sha256::digest(write_export(model)?)))
}

pub fn save_export(model: &Int8Model, path: &Path) -> Result<()> {
    fs::write(path, write_export(model)?)?;
    Ok(())
}

pub fn load_export(path: &Path) -> Result<Int8Model> {
    read_export(&fs::read(path)?)
}
