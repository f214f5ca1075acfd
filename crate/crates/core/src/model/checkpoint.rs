//! Binary checkpoints: `MSHC1\n`, an 8-byte little-endian header length, a
//! JSON header, then the little-endian `f32` blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::config::ModelConfig;
use crate::autodiff::{ParameterSet, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"MSHC1\n";
const METADATA_KEY: &str = "__metadata__";

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

/// Parameters plus free-form metadata (the model configuration lives under
/// `model_config`).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub metadata: Map<String, Value>,
}

impl Checkpoint {
    pub fn new(params: ParameterSet, config: &ModelConfig) -> Result<Self> {
        let mut metadata = Map::new();
        metadata.insert("model_config".into(), serde_json::to_value(config)?);
        Ok(Self { params, metadata })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let v = self
            .metadata
            .get("model_config")
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no model configuration".into()))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("bad model configuration: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, encode(&self.params, &self.metadata)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let (params, metadata) = decode(&bytes)?;
        Ok(Self { params, metadata })
    }
}

pub fn save_checkpoint(params: &ParameterSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(params, &Map::new())?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterSet> {
    Ok(decode(&fs::read(path)?)?.0)
}

pub fn encode(params: &ParameterSet, metadata: &Map<String, Value>) -> Result<Vec<u8>> {
    let mut header = Map::new();
    if !metadata.is_empty() {
        header.insert(METADATA_KEY.into(), Value::Object(metadata.clone()));
    }
    let mut blob = Vec::with_capacity(params.total_elements() * 4);
    for (_, name, t) in params.iter() {
        if name == METADATA_KEY {
            return Err(Error::Checkpoint(format!("`{METADATA_KEY}` is reserved")));
        }
        let entry = Entry {
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: blob.len(),
        };
        for &v in t.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Checkpoint(format!("parameter `{name}` is not representable as f32")));
            }
            blob.extend_from_slice(&f.to_le_bytes());
        }
        header.insert(name.to_string(), serde_json::to_value(entry)?);
    }
    let header = serde_json::to_vec(&Value::Object(header))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ParameterSet, Map<String, Value>)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        let version = bytes
            .strip_prefix(b"MSHC")
            .and_then(|rest| rest.split(|&b| b == b'\n').next())
            .map(|v| String::from_utf8_lossy(v).into_owned());
        return Err(Error::Checkpoint(match version {
            Some(v) => format!("unsupported checkpoint version `{v}` (expected 1)"),
            None => "not a checkpoint (bad magic, expected MSHC1)".into(),
        }));
    }
    let rest = &bytes[MAGIC.len()..];
    let len_bytes: [u8; 8] = rest
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Checkpoint("truncated header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_bytes = rest
        .get(8..8usize.saturating_add(header_len))
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let blob = &rest[8 + header_len..];
    let header: Map<String, Value> =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    let mut metadata = Map::new();
    let mut entries = BTreeMap::new();
    for (name, v) in header {
        if name == METADATA_KEY {
            metadata = match v {
                Value::Object(m) => m,
                _ => return Err(Error::Checkpoint("metadata must be an object".into())),
            };
            continue;
        }
        let e: Entry =
            serde_json::from_value(v).map_err(|err| Error::Checkpoint(format!("bad entry for `{name}`: {err}")))?;
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!("`{name}` has unsupported dtype `{}`", e.dtype)));
        }
        entries.insert((e.offset, name), e.shape);
    }

    let mut params = ParameterSet::new();
    let mut expected = 0usize;
    for ((offset, name), shape) in entries {
        if offset != expected {
            return Err(Error::Checkpoint(format!("`{name}` at offset {offset}, expected {expected}")));
        }
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        let raw = blob
            .get(offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("truncated blob while reading `{name}`")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
        expected = end;
    }
    if expected != blob.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            blob.len() - expected
        )));
    }
    Ok((params, metadata))
}
