//! IDX container format: big-endian `00 00 <type> <ndims>` magic, `ndims`
//! big-endian `u32` extents, then the payload.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

pub const TYPE_U8: u8 = 0x08;
pub const TYPE_F32: u8 = 0x0D;
pub const TYPE_F64: u8 = 0x0E;

pub const MAGIC_LABELS: u32 = 0x0000_0801;
pub const MAGIC_IMAGES: u32 = 0x0000_0803;

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        let ty = match self.data {
            IdxData::U8(_) => TYPE_U8,
            IdxData::F64(_) => TYPE_F64,
        };
        (u32::from(ty) << 8) | self.dims.len() as u32
    }

    pub fn into_u8(self) -> Result<Vec<u8>> {
        match self.data {
            IdxData::U8(v) => Ok(v),
            IdxData::F64(_) => Err(Error::Format("expected unsigned-byte IDX payload".into())),
        }
    }

    pub fn into_f64(self) -> Vec<f64> {
        match self.data {
            IdxData::U8(v) => v.into_iter().map(f64::from).collect(),
            IdxData::F64(v) => v,
        }
    }
}

pub fn parse(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format("missing IDX magic".into()));
    }
    let (ty, ndims) = (bytes[2], bytes[3] as usize);
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Format("truncated IDX header".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let width = match ty {
        TYPE_U8 => 1,
        TYPE_F32 => 4,
        TYPE_F64 => 8,
        other => return Err(Error::Format(format!("unsupported IDX element type 0x{other:02x}"))),
    };
    let payload = &bytes[header..];
    if payload.len() != count * width {
        return Err(Error::Format(format!(
            "IDX payload has {} bytes, extents {dims:?} need {}",
            payload.len(),
            count * width
        )));
    }
    let data = match ty {
        TYPE_U8 => IdxData::U8(payload.to_vec()),
        TYPE_F32 => IdxData::F64(
            payload
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_be_bytes([c[0], c[1], c[2], c[3]])))
                .collect(),
        ),
        _ => IdxData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_be_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        ),
    };
    Ok(IdxArray { dims, data })
}

pub fn read(path: &Path) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn encode(array: &IdxArray) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&array.magic().to_be_bytes());
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    match &array.data {
        IdxData::U8(v) => out.extend_from_slice(v),
        IdxData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
    }
    out
}

pub fn write(path: &Path, array: &IdxArray) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(array)).map_err(|e| Error::io(path, e))
}
