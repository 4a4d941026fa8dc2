//! Single-file checkpoint container.
//!
//! Layout: `MAGIC\n`, u64 LE header length, JSON header
//! `{"meta": .., "tensors": [{"name", "shape"}, ..]}`, then every tensor's
//! values as f64 LE in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::params::NamedTensor;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<NamedTensor>,
}

pub fn write_container(path: &Path, magic: &str, meta: Value, tensors: &[NamedTensor]) -> Result<()> {
    let header = Header {
        meta,
        tensors: tensors.to_vec(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let payload_len: usize = tensors.iter().map(|t| t.data.len() * 8).sum();
    let mut buf = Vec::with_capacity(magic.len() + 9 + header_bytes.len() + payload_len);
    buf.extend_from_slice(magic.as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for t in tensors {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path, magic: &str) -> Result<(Value, Vec<NamedTensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut offset = magic.len() + 1;
    if bytes.len() < offset || &bytes[..magic.len()] != magic.as_bytes() || bytes[magic.len()] != b'\n' {
        return Err(Error::format(path, 0, format!("expected container magic {magic}")));
    }
    if bytes.len() < offset + 8 {
        return Err(Error::format(path, offset as u64, "truncated header length"));
    }
    let header_len = u64::from_le_bytes(bytes[offset..offset + 8].try_into().expect("8 bytes")) as usize;
    offset += 8;
    if bytes.len() - offset < header_len {
        return Err(Error::format(path, offset as u64, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[offset..offset + header_len])
        .map_err(|e| Error::format(path, offset as u64, e.to_string()))?;
    offset += header_len;
    let mut tensors = header.tensors;
    for t in &mut tensors {
        let count: usize = t.shape.iter().product();
        if bytes.len() - offset < count * 8 {
            return Err(Error::format(
                path,
                offset as u64,
                format!("truncated payload for tensor {}", t.name),
            ));
        }
        t.data = bytes[offset..offset + count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += count * 8;
    }
    if offset != bytes.len() {
        return Err(Error::format(path, offset as u64, "trailing bytes after payload"));
    }
    Ok((header.meta, tensors))
}
