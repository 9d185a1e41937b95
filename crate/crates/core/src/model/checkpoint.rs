//! Checkpoint files: little-endian `u64` header length, a JSON header listing
//! every tensor's name, shape and byte offset, then the raw `f64` data.

use crate::diff::ParamSet;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tensors: Vec<Entry>,
}

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut data = Vec::with_capacity(params.numel() * 8);
    for p in params.iter() {
        tensors.push(Entry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset: data.len() });
        for v in p.value.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header { tensors }).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + data.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    out
}

/// Overwrites every parameter of `params` with the tensor of the same name.
pub fn decode_into(bytes: &[u8], params: &mut ParamSet) -> Result<()> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Format("checkpoint shorter than its header length".into()))?;
    let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| Error::Format("header length overflows".into()))?;
    let header_bytes = bytes
        .get(8..8usize.saturating_add(hlen))
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let data = &bytes[8 + hlen..];
    if header.tensors.len() != params.len() {
        return Err(Error::Format(format!("checkpoint has {} tensors, model has {}", header.tensors.len(), params.len())));
    }
    for id in params.ids().collect::<Vec<_>>() {
        let p = params.get_mut(id);
        let e = header
            .tensors
            .iter()
            .find(|e| e.name == p.name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{}`", p.name)))?;
        if e.shape != p.value.shape() {
            return Err(Error::Format(format!("tensor `{}` has shape {:?}, expected {:?}", p.name, e.shape, p.value.shape())));
        }
        let n = p.value.len();
        let raw = data
            .get(e.offset..e.offset + 8 * n)
            .ok_or_else(|| Error::Format(format!("truncated data for `{}`", p.name)))?;
        for (dst, chunk) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    Ok(())
}

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_into(path: &Path, params: &mut ParamSet) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_into(&bytes, params)
}
