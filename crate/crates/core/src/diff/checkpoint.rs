//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "UDCK"            4 bytes magic
//! version: u32      currently 1
//! repeated until EOF:
//!   name_len: u64, name: UTF-8 bytes
//!   rank: u64, dims: rank × u64
//!   values: Π dims × f64
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(store: &ParamStore, w: &mut impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint(format!("{} at byte {}", msg.into(), self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads all named tensors in file order.
pub fn read_checkpoint(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic at byte 0".into()));
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version} at byte 4")));
    }
    let mut out = Vec::new();
    while c.pos < buf.len() {
        let n = c.u64()? as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(n)?).map_err(|_| Error::Checkpoint(format!("name is not UTF-8 at byte {at}")))?.to_string();
        let rank = c.u64()? as usize;
        if rank > 16 {
            return Err(c.err(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| c.err("shape overflow"))?;
        let nbytes = count.checked_mul(8).ok_or_else(|| c.err("shape overflow"))?;
        let bytes = c.take(nbytes)?;
        let data: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(c.err(format!("non-finite value in {name}")));
        }
        out.push((name, Tensor { shape, data }));
    }
    Ok(out)
}

impl ParamStore {
    /// Overwrites parameter values by name. Every stored parameter must be
    /// present with a matching shape.
    pub fn load_values(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        for id in self.ids().collect::<Vec<_>>() {
            let name = self.name(id).to_string();
            let Some((_, t)) = entries.iter().find(|(n, _)| *n == name) else {
                return Err(Error::Checkpoint(format!("missing parameter {name}")));
            };
            if t.shape != self.get(id).shape {
                return Err(Error::Checkpoint(format!("shape of {name}: checkpoint {:?}, model {:?}", t.shape, self.get(id).shape)));
            }
            *self.get_mut(id) = t.clone();
        }
        Ok(())
    }
}
