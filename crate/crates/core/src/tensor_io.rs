//! Versioned container of named tensors plus JSON metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "TXRT"
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 JSON
//! count      u32
//! count x {
//!     name_len u32, name bytes (UTF-8)
//!     dtype    u8   (0 = f32, 1 = f64)
//!     ndim     u32, then ndim x u64 dims
//!     data     product(dims) elements, little-endian
//! }
//! end magic  4 bytes  "END!"
//! ```
//!
//! Tensors are written in name order, so identical contents always produce
//! identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TXRT";
const END: &[u8; 4] = b"END!";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn encode(meta: &serde_json::Value, tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta = serde_json::to_vec(meta).map_err(|e| Error::Corrupt(e.to_string()))?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F64 => {
                out.push(1);
                write_dims(&mut out, t.dims());
                for v in flat.to_vec1::<f64>()? {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            _ => {
                out.push(0);
                write_dims(&mut out, t.dims());
                for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out.extend_from_slice(END);
    Ok(out)
}

fn write_dims(out: &mut Vec<u8>, dims: &[usize]) {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8], device: &Device) -> Result<TensorFile> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let meta_len = c.u32()? as usize;
    let meta = serde_json::from_slice(c.take(meta_len)?).map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
    let count = c.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec()).map_err(|e| Error::Corrupt(e.to_string()))?;
        let dtype = c.take(1)?[0];
        let ndim = c.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Corrupt(format!("`{name}`: {ndim} dims")));
        }
        let dims = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let t = match dtype {
            0 => {
                let bytes = c.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt("size overflow".into()))?)?;
                let v: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, device)?
            }
            1 => {
                let bytes = c.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("size overflow".into()))?)?;
                let v: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, device)?
            }
            other => return Err(Error::Corrupt(format!("`{name}`: unknown dtype tag {other}"))),
        };
        tensors.insert(name, t);
    }
    if c.take(4)? != END || c.pos != buf.len() {
        return Err(Error::Corrupt("missing end marker".into()));
    }
    Ok(TensorFile { meta, tensors })
}

pub fn write_file(path: &Path, meta: &serde_json::Value, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let bytes = encode(meta, tensors)?;
    let tmp = path.with_extension("partial");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_file(path: &Path, device: &Device) -> Result<TensorFile> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf, device)
}
