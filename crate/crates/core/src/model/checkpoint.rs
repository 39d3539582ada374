//! Checkpoint archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "QMDT-CKPT" | version: u32 | count: u32
//! count × ( name_len: u32 | name: utf-8 | ndim: u32 | dims: u32 × ndim | values: f32 × numel )
//! ```
//!
//! Entries appear in sorted name order. Values are stored at 32-bit precision,
//! so parameters that are already `f32`-representable round-trip bitwise.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"QMDT-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.numel() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: wanted {n} more bytes")));
        }
        let bytes: &'a [u8] = self.bytes;
        let s = &bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader {
        path,
        bytes,
        pos: 0,
    };
    let magic = r.take(CHECKPOINT_MAGIC.len())?;
    if magic != CHECKPOINT_MAGIC {
        let found = String::from_utf8_lossy(magic).into_owned();
        r.pos = 0;
        return Err(r.fail(format!("bad magic {found:?}, expected \"QMDT-CKPT\"")));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParamStore::new();
    let mut last: Option<String> = None;
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.fail("parameter name is not utf-8"))?
            .to_string();
        if last.as_ref().is_some_and(|prev| prev >= &name) {
            return Err(r.fail(format!("entry `{name}` out of sorted order")));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| r.fail(e.to_string()))?;
        params.insert(name.clone(), tensor)?;
        last = Some(name);
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last entry"));
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    let bytes = encode_checkpoint(params);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}

/// Rounds every value to the nearest `f32`.
pub fn round_to_f32(params: &mut ParamStore) {
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v = f64::from(*v as f32);
        }
    }
}
