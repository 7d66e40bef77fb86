//! Named-array container.
//!
//! ```text
//! b"SSCK"  u32 LE header length  JSON header  f64 LE payload
//! ```
//!
//! The header holds free-form metadata and, for each array in storage order,
//! its name and shape. Payload arrays follow back to back in the same order.
//! Values are stored bit-exactly, so save → load is lossless.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierParams, ClassifierSpec, ParamTensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SSCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode_arrays(meta: &serde_json::Value, arrays: &[NamedArray]) -> Result<Vec<u8>> {
    for a in arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(Error::shape(format!("array {} has shape {:?} but {} values", a.name, a.shape, a.data.len())));
        }
    }
    let header = Header {
        version: VERSION,
        meta: meta.clone(),
        arrays: arrays.iter().map(|a| ArrayEntry { name: a.name.clone(), shape: a.shape.clone() }).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let total: usize = arrays.iter().map(|a| a.data.len()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 8 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for a in arrays {
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_arrays(bytes: &[u8], path: &Path) -> Result<(serde_json::Value, Vec<NamedArray>)> {
    let malformed = |reason: String| Error::MalformedHeader { path: path.to_path_buf(), reason };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(malformed("not a checkpoint (bad magic)".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(8..8 + len).ok_or_else(|| malformed("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| malformed(format!("header: {e}")))?;
    if header.version != VERSION {
        return Err(malformed(format!("unsupported version {}", header.version)));
    }
    let mut payload = bytes[8 + len..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let needed: usize = header.arrays.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if (bytes.len() - 8 - len) != needed * 8 {
        return Err(Error::shape(format!(
            "{}: payload holds {} bytes, header describes {}",
            path.display(),
            bytes.len() - 8 - len,
            needed * 8
        )));
    }
    let arrays = header
        .arrays
        .into_iter()
        .map(|e| {
            let n = e.shape.iter().product();
            NamedArray { name: e.name, shape: e.shape, data: payload.by_ref().take(n).collect() }
        })
        .collect();
    Ok((header.meta, arrays))
}

pub fn write_arrays(path: &Path, meta: &serde_json::Value, arrays: &[NamedArray]) -> Result<()> {
    let bytes = encode_arrays(meta, arrays)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_arrays(path: &Path) -> Result<(serde_json::Value, Vec<NamedArray>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_arrays(&bytes, path)
}

/// Arrays of one classifier, names prefixed with `prefix`.
pub fn classifier_arrays(params: &ClassifierParams, prefix: &str) -> Vec<NamedArray> {
    params
        .tensors
        .iter()
        .map(|t| NamedArray { name: format!("{prefix}{}", t.name), shape: t.shape.clone(), data: t.data.clone() })
        .collect()
}

/// Rebuilds a classifier from arrays named `prefix + tensor name`, checking
/// the layout implied by `spec`.
pub fn classifier_from_arrays(spec: &ClassifierSpec, arrays: &[NamedArray], prefix: &str) -> Result<ClassifierParams> {
    spec.validate()?;
    let tensors = super::parameter_layout(spec)
        .into_iter()
        .map(|(name, shape)| {
            let full = format!("{prefix}{name}");
            let a = arrays
                .iter()
                .find(|a| a.name == full)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks array {full}")))?;
            if a.shape != shape {
                return Err(Error::shape(format!("array {full} has shape {:?}, expected {shape:?}", a.shape)));
            }
            Ok(ParamTensor { name, shape, data: a.data.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassifierParams { spec: spec.clone(), tensors })
}
