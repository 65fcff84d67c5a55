//! Binary checkpoint files.
//!
//! Layout: `ROCL`, u32 version, u32 header length, UTF-8 header, tensor
//! payloads (little endian, header order), u32 CRC32 of the payload.
//! The header has a `[config]`, `[metadata]` and `[tensors]` section; each
//! tensor line reads `name tag dtype d0,d1,...`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{Component, Model, ModelConfig, ModelParams};
use crate::tensor::{Element, Tensor};
use crate::Real;

pub const MAGIC: &[u8; 4] = b"ROCL";
pub const VERSION: u32 = 1;

/// Free-form key/value metadata (seed lineage, epoch, command).
pub type Metadata = BTreeMap<String, String>;

pub fn encode_checkpoint(model: &Model, metadata: &Metadata) -> Result<Vec<u8>> {
    let mut header = String::from("[config]\n");
    for (k, v) in model.config.to_pairs() {
        header.push_str(&format!("{k}={v}\n"));
    }
    header.push_str("[metadata]\n");
    for (k, v) in metadata {
        if k.contains(['=', '\n']) || v.contains('\n') || k.trim() != k || k.is_empty() {
            return Err(Error::Invalid(format!("metadata entry `{k}` cannot be stored")));
        }
        header.push_str(&format!("{k}={v}\n"));
    }
    header.push_str("[tensors]\n");
    let mut payload = Vec::new();
    for spec in model.params.specs() {
        let t = model.params.get(&spec.name).expect("spec names are present");
        let dims = t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        header.push_str(&format!("{} {} {} {}\n", spec.name, spec.component.tag(), Real::DTYPE, dims));
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

fn u32_at(bytes: &[u8], offset: usize) -> Result<u32, CheckpointError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
        .ok_or(CheckpointError::Truncated { offset: bytes.len() })
}

struct TableRow {
    name: String,
    component: Component,
    dtype: String,
    shape: Vec<usize>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, Metadata), CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated { offset: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32_at(bytes, 4)?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version, expected: VERSION });
    }
    let hlen = u32_at(bytes, 8)? as usize;
    let header = bytes.get(12..12 + hlen).ok_or(CheckpointError::Truncated { offset: bytes.len() })?;
    let header = std::str::from_utf8(header).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let mut config = BTreeMap::new();
    let mut metadata = Metadata::new();
    let mut rows = Vec::new();
    let mut section = "";
    for line in header.lines() {
        if line.starts_with('[') {
            section = line;
            continue;
        }
        match section {
            "[config]" | "[metadata]" => {
                let (k, v) = line.split_once('=').ok_or_else(|| CheckpointError::Header(format!("bad line `{line}`")))?;
                let target = if section == "[config]" { &mut config } else { &mut metadata };
                target.insert(k.to_string(), v.to_string());
            }
            "[tensors]" => {
                let parts: Vec<&str> = line.split(' ').collect();
                let [name, tag, dtype, dims] = parts[..] else {
                    return Err(CheckpointError::Header(format!("bad tensor line `{line}`")));
                };
                let component = Component::from_tag(tag).ok_or_else(|| CheckpointError::Header(format!("unknown tag `{tag}`")))?;
                let shape = dims
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| CheckpointError::Header(format!("bad shape `{dims}`")))?;
                rows.push(TableRow { name: name.to_string(), component, dtype: dtype.to_string(), shape });
            }
            _ => return Err(CheckpointError::Header(format!("line outside a section: `{line}`"))),
        }
    }

    let config = ModelConfig::from_pairs(&config).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let specs = config.param_specs();
    if specs.len() != rows.len() {
        return Err(CheckpointError::Table(format!("{} tensors listed, config implies {}", rows.len(), specs.len())));
    }
    for (spec, row) in specs.iter().zip(&rows) {
        if row.dtype != Real::DTYPE {
            return Err(CheckpointError::Dtype { found: row.dtype.clone(), expected: Real::DTYPE });
        }
        if spec.name != row.name || spec.shape != row.shape || spec.component != row.component {
            return Err(CheckpointError::Table(format!("entry `{}` {:?} does not match expected `{}` {:?}", row.name, row.shape, spec.name, spec.shape)));
        }
    }

    let start = 12 + hlen;
    let payload_len: usize = rows.iter().map(|r| r.shape.iter().product::<usize>() * Real::BYTES).sum();
    let end = start + payload_len;
    if bytes.len() < end + 4 {
        return Err(CheckpointError::Truncated { offset: bytes.len() });
    }
    if bytes.len() > end + 4 {
        return Err(CheckpointError::Table(format!("{} trailing bytes after the checksum", bytes.len() - end - 4)));
    }
    let payload = &bytes[start..end];
    if crc32fast::hash(payload) != u32_at(bytes, end)? {
        return Err(CheckpointError::Checksum);
    }
    let mut tensors = BTreeMap::new();
    let mut off = 0;
    for row in rows {
        let n: usize = row.shape.iter().product();
        let data: Vec<Real> = payload[off..off + n * Real::BYTES].chunks(Real::BYTES).map(Real::read_le).collect();
        off += n * Real::BYTES;
        let t = Tensor::new(row.shape, data).map_err(|e| CheckpointError::Table(format!("{}: {e}", row.name)))?;
        tensors.insert(row.name, t);
    }
    let params = ModelParams::from_tensors(&config, tensors).map_err(|e| CheckpointError::Table(e.to_string()))?;
    Ok((Model { config, params }, metadata))
}

pub fn save_checkpoint(model: &Model, metadata: &Metadata, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, metadata)?;
    fs::write(path, bytes).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Metadata)> {
    let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(decode_checkpoint(&bytes)?)
}
