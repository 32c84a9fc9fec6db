//! UPLCKPT1 checkpoints: the magic, then per tensor a u32 name length, the
//! UTF-8 name, five u32 extents and the f32 samples, all little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Shape, Tensor5};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UPLCKPT1";

pub fn checkpoint_bytes<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        for &e in &p.value.shape().0 {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_bytes(store))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn parse_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor5<T>)>> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: "checkpoint".into(),
        });
    }
    let mut r = Reader { bytes, pos: 8 };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?
            .to_string();
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()?;
        }
        let shape = Shape(dims);
        let n = shape.numel();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push((name, Tensor5::from_vec(shape, data)?));
    }
    Ok(out)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor5<T>)>> {
    parse_checkpoint(&fs::read(path)?)
}
