//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CEMFCKPT"  u32 version
//! u32 header_len, header: UTF-8 TOML of the ModelConfig
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 ndim, u64 dims[ndim], f64 payload[numel]
//! ```

use std::path::Path;

use super::{Cemformer, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::kernel::Tensor;

const MAGIC: &[u8; 8] = b"CEMFCKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint(model: &Cemformer) -> Result<Vec<u8>> {
    let header = toml::to_string(model.config())
        .map_err(|e| Error::contract(format!("cannot serialize config: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, tensor) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.origin, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let origin = self.origin;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::format(origin, "invalid UTF-8 in checkpoint"))
    }
}

pub fn read_checkpoint(bytes: &[u8], origin: &Path) -> Result<Cemformer> {
    let mut r = Reader {
        bytes,
        pos: 0,
        origin,
    };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::format(origin, "bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header = r.string(header_len)?;
    let config: ModelConfig = toml::from_str(&header)
        .map_err(|e| Error::format(origin, format!("bad checkpoint header: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let ndim = r.u32()? as usize;
        if ndim > 2 {
            return Err(Error::format(origin, format!("tensor {name} has rank {ndim}")));
        }
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = r.take(numel.checked_mul(8).ok_or_else(|| Error::format(origin, "tensor too large"))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params
            .push(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::format(origin, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(origin, "trailing bytes after checkpoint"));
    }
    Cemformer::from_params(config, params).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn save_checkpoint(model: &Cemformer, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Cemformer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, path)
}
