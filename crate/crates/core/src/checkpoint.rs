//! Flat binary checkpoints.
//!
//! `LKCA1`, then per registry entry: name length (`u32` LE), name bytes,
//! rank (`u32` LE), extents (`u32` LE each), `f32` LE data. Entries run to
//! end of file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, VisionModel};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 5] = b"LKCA1";

pub fn encode<T: Scalar>(model: &VisionModel<T>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in model.registry() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_f32_le());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Every `(name, tensor)` entry in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::Checkpoint("missing LKCA1 magic".into()));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32("name length")?;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("tensor name at byte {} is not UTF-8", r.pos)))?;
        let rank = r.u32("rank")?;
        let shape = (0..rank)
            .map(|_| r.u32("extent"))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save<T: Scalar>(model: &VisionModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

/// Builds a model for `config` and fills it from the file; every tensor
/// must be present with the shape `config` implies.
pub fn load<T: Scalar>(config: &ModelConfig, path: impl AsRef<Path>) -> Result<VisionModel<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(config, &bytes)
}

pub fn from_bytes<T: Scalar>(config: &ModelConfig, bytes: &[u8]) -> Result<VisionModel<T>> {
    let entries = decode(bytes)?;
    let mut model = VisionModel::<T>::init(config, 0)?;
    model.assign(entries.iter().map(|(n, t)| (n.as_str(), t.cast::<T>())))?;
    Ok(model)
}
