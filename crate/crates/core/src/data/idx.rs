//! IDX container used by the handwritten-digit corpora.
//!
//! Big-endian magic `0x00000803` marks rank-3 unsigned-byte images, which are
//! scaled to `[0, 1]`; `0x00000801` marks rank-1 unsigned-byte labels, which
//! keep their integer values.

use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::format("IDX file truncated in header"))
    };
    let magic = word(0)?;
    let (rank, divisor) = match magic {
        IMAGES_MAGIC => (3, 255.0),
        LABELS_MAGIC => (1, 1.0),
        other => return Err(Error::format(format!("unsupported IDX magic {other:#010x}"))),
    };
    let shape: Vec<usize> = (1..=rank).map(|i| word(i).map(|w| w as usize)).collect::<Result<_>>()?;
    let n: usize = shape.iter().product();
    let start = 4 * (rank + 1);
    let body = &bytes[start.min(bytes.len())..];
    if body.len() < n {
        return Err(Error::format(format!(
            "IDX body has {} bytes, expected {n} for shape {shape:?}",
            body.len()
        )));
    }
    let data = body[..n]
        .iter()
        .map(|&b| b as f64 / divisor)
        .collect();
    Tensor::new(shape, data)
}

pub fn load_idx(path: &Path) -> Result<Tensor> {
    parse_idx(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_magic_rejected() {
        let bytes = [0u8, 0, 8, 2, 0, 0, 0, 1, 7];
        assert!(parse_idx(&bytes).is_err());
    }

    #[test]
    fn labels_keep_integer_values() {
        let bytes = [0u8, 0, 8, 1, 0, 0, 0, 3, 7, 0, 9];
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.shape(), &[3]);
        assert_eq!(t.data(), &[7.0, 0.0, 9.0]);
    }

    #[test]
    fn truncated_body_rejected() {
        let bytes = [0u8, 0, 8, 1, 0, 0, 0, 3, 7, 0];
        assert!(parse_idx(&bytes).is_err());
    }
}
