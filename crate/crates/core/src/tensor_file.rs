//! `.ten` tensor files.
//!
//! Layout: the 8-byte magic `MVMTEN01`, then little-endian fields: a `u8`
//! dtype code (1 = float32, 2 = uint8), a `u8` rank, `rank` × `u32`
//! dimensions, and finally the row-major payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{MvmError, Result};

pub const MAGIC: &[u8; 8] = b"MVMTEN01";
const DTYPE_F32: u8 = 1;
const DTYPE_U8: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            dims,
            data: TensorData::F32(data),
        }
    }

    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Self {
        Self {
            dims,
            data: TensorData::U8(data),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let (code, payload_len) = match &self.data {
            TensorData::F32(v) => (DTYPE_F32, v.len() * 4),
            TensorData::U8(v) => (DTYPE_U8, v.len()),
        };
        let mut out = Vec::with_capacity(10 + 4 * self.dims.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.push(code);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Decodes a buffer; `Err` carries a human-readable reason.
    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 10 || &bytes[..8] != MAGIC {
            return Err("bad magic".into());
        }
        let code = bytes[8];
        let ndim = bytes[9] as usize;
        let header = 10 + 4 * ndim;
        if bytes.len() < header {
            return Err("truncated header".into());
        }
        let dims: Vec<usize> = bytes[10..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let count: usize = dims.iter().product();
        let payload = &bytes[header..];
        let data = match code {
            DTYPE_F32 => {
                if payload.len() != count * 4 {
                    return Err(format!(
                        "payload has {} bytes, dims {dims:?} need {}",
                        payload.len(),
                        count * 4
                    ));
                }
                TensorData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            DTYPE_U8 => {
                if payload.len() != count {
                    return Err(format!(
                        "payload has {} bytes, dims {dims:?} need {count}",
                        payload.len()
                    ));
                }
                TensorData::U8(payload.to_vec())
            }
            other => return Err(format!("unknown dtype code {other}")),
        };
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    /// Reads a tensor file, reporting any format problem as a corrupt study.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MvmError::CorruptStudy {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::decode(&bytes).map_err(|reason| MvmError::CorruptStudy {
            path: path.to_path_buf(),
            reason,
        })
    }
}
