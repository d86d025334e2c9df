//! Binary model container.
//!
//! Layout: magic `CTSM`, `u32` header length, JSON header, little-endian
//! `f64` weight blocks in header order, then a CRC-32 of all preceding bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Flavor, SurrogateModel};
use crate::autodiff::Tensor;
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"CTSM";
pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    arch: Architecture,
    params: Vec<ParamEntry>,
}

pub fn write_model(model: &SurrogateModel) -> Result<Vec<u8>> {
    let header = Header {
        schema_version: MODEL_SCHEMA_VERSION,
        arch: *model.arch(),
        params: model
            .arch()
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| ParamEntry {
                name: name.to_string(),
                shape: shape.to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * model.arch().n_weights());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for w in model.weights() {
        for v in w.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parses a container; `expected` rejects a model of another flavor.
pub fn read_model(bytes: &[u8], expected: Option<Flavor>) -> Result<SurrogateModel> {
    let corrupt = |msg: &str| Error::Validation(format!("model file: {msg}"));
    if bytes.len() < 12 || &bytes[..4] != MODEL_MAGIC {
        return Err(corrupt("missing CTSM magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let header_len = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes")) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&body[8..header_end])?;
    if header.schema_version != MODEL_SCHEMA_VERSION {
        return Err(Error::Version {
            found: header.schema_version.to_string(),
            expected: MODEL_SCHEMA_VERSION.to_string(),
        });
    }
    if let Some(flavor) = expected {
        if header.arch.flavor != flavor {
            return Err(Error::Architecture(format!(
                "file holds a {} model, expected {flavor}",
                header.arch.flavor
            )));
        }
    }
    let shapes = header.arch.param_shapes();
    let declared: Vec<(&str, &[usize])> = header.params.iter().map(|p| (p.name.as_str(), &p.shape[..])).collect();
    let wanted: Vec<(&str, &[usize])> = shapes.iter().map(|(n, s)| (*n, &s[..])).collect();
    if declared != wanted {
        return Err(Error::Architecture("parameter table does not match the architecture".into()));
    }
    let mut floats = body[header_end..].chunks_exact(8);
    if floats.len() != header.arch.n_weights() || !floats.remainder().is_empty() {
        return Err(corrupt("weight block size does not match the header"));
    }
    let weights = shapes
        .iter()
        .map(|(_, [r, c])| {
            let data = floats
                .by_ref()
                .take(r * c)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            Tensor::matrix(*r, *c, data)
        })
        .collect::<Result<Vec<_>>>()?;
    SurrogateModel::from_weights(header.arch, weights)
}

pub fn save_model(model: &SurrogateModel, path: &Path) -> Result<()> {
    let bytes = write_model(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_model(path: &Path, expected: Option<Flavor>) -> Result<SurrogateModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    read_model(&bytes, expected)
}
