//! IDX arrays (the MNIST container): two zero bytes, an element-type byte,
//! a rank byte, `rank` big-endian `u32` extents, then the raw elements.
//! Only unsigned bytes (type `0x08`) are supported.

use std::path::Path;

use crate::error::{dim_err, Error, IdxErrorKind, Result};
use crate::tensor::{Scalar, Tensor};

use super::data::Dataset;

pub const IDX_UBYTE: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn truncated(bytes: &[u8], needed: usize) -> Error {
    Error::Idx {
        offset: bytes.len(),
        kind: IdxErrorKind::Truncated {
            needed,
            available: bytes.len(),
        },
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    for offset in 0..2 {
        match bytes.get(offset) {
            None => return Err(truncated(bytes, 4)),
            Some(0) => {}
            Some(_) => {
                return Err(Error::Idx {
                    offset,
                    kind: IdxErrorKind::BadMagic,
                })
            }
        }
    }
    match bytes.get(2) {
        None => return Err(truncated(bytes, 4)),
        Some(&IDX_UBYTE) => {}
        Some(&t) => {
            return Err(Error::Idx {
                offset: 2,
                kind: IdxErrorKind::UnsupportedType(t),
            })
        }
    }
    let rank = *bytes.get(3).ok_or_else(|| truncated(bytes, 4))? as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(truncated(bytes, header));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let end = header + count;
    if bytes.len() < end {
        return Err(truncated(bytes, end));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..end].to_vec(),
    })
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_UBYTE, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Rank-3 `[n, H, W]` or rank-4 `[n, H, W, C]` pixels scaled by `1/255`.
pub fn idx_images<T: Scalar>(arr: &IdxArray) -> Result<Tensor<T>> {
    let shape = match arr.dims.as_slice() {
        [n, h, w] => vec![*n, *h, *w, 1],
        [n, h, w, c] => vec![*n, *h, *w, *c],
        other => return Err(dim_err!("IDX images must be rank 3 or 4, got dims {other:?}")),
    };
    Tensor::new(shape, arr.data.iter().map(|&b| T::of(b as f64 / 255.0)).collect())
}

pub fn idx_labels(arr: &IdxArray) -> Result<Vec<usize>> {
    if arr.dims.len() != 1 {
        return Err(dim_err!("IDX labels must be rank 1, got dims {:?}", arr.dims));
    }
    Ok(arr.data.iter().map(|&b| b as usize).collect())
}

pub fn load_idx_dataset<T: Scalar>(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    num_classes: usize,
) -> Result<Dataset<T>> {
    let images = idx_images(&load_idx(images)?)?;
    let labels = idx_labels(&load_idx(labels)?)?;
    Dataset::new(images, labels, num_classes)
}
