//! Little-endian binary encoding shared by checkpoints, state snapshots and
//! episode files.
//!
//! Parameter file layout (version 1):
//!
//! ```text
//! magic  "RMPS"
//! u32    format version
//! u64    init seed
//! u32    group count
//! per group:
//!   u32 name length, utf-8 name
//!   u8  trainable flag
//!   u32 rows, u32 cols
//!   rows*cols f32
//! ```

use super::matrix::Matrix;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"RMPS";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Default)]
pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn f32s(&mut self, v: &[f32]) {
        for &x in v {
            self.f32(x);
        }
    }

    pub fn matrix(&mut self, m: &Matrix) {
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        self.f32s(m.data());
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!("truncated: wanted {n} bytes at offset {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let got = self.take(magic.len())?;
        if got != magic {
            return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(got))));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        Ok(Matrix::from_vec(rows, cols, self.f32s(rows * cols)?))
    }

    pub fn version(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::Version { found, expected });
        }
        Ok(())
    }
}

pub fn write_params(w: &mut ByteWriter, store: &ParamStore) {
    w.bytes(PARAMS_MAGIC);
    w.u32(PARAMS_VERSION);
    w.u64(store.seed());
    w.u32(store.len() as u32);
    for g in store.groups() {
        w.str(&g.name);
        w.u8(g.trainable as u8);
        w.matrix(&g.value);
    }
}

pub fn read_params(r: &mut ByteReader<'_>) -> Result<ParamStore> {
    r.expect_magic(PARAMS_MAGIC)?;
    r.version(PARAMS_VERSION)?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new(seed);
    for _ in 0..count {
        let name = r.str()?;
        let trainable = r.u8()? != 0;
        let value = r.matrix()?;
        store.insert(&name, value, trainable)?;
    }
    Ok(store)
}

/// Copies values and trainable flags from `loaded` into `target`, requiring
/// identical names, order and shapes.
pub fn load_into(target: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameter groups, model expects {}",
            loaded.len(),
            target.len()
        )));
    }
    for id in loaded.ids() {
        let src = loaded.group(id);
        let dst = target.group(id);
        if src.name != dst.name || src.value.shape() != dst.value.shape() {
            return Err(Error::Config(format!(
                "checkpoint group `{}` {:?} does not match model group `{}` {:?}",
                src.name,
                src.value.shape(),
                dst.name,
                dst.value.shape()
            )));
        }
    }
    for id in loaded.ids() {
        let src = loaded.group(id);
        *target.get_mut(id) = src.value.clone();
        target.set_trainable(id, src.trainable);
    }
    Ok(())
}
