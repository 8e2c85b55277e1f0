//! IDX files: two zero bytes, a type code, a dimension count, big-endian
//! `u32` extents, then the raw payload. Only unsigned bytes (`0x08`) are
//! supported.

use std::path::Path;

use super::DataError;
use crate::diffcore::Tensor;

const TYPE_U8: u8 = 0x08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxData {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxData {
    /// Values rescaled to `[0, 1]`, shaped by `dims`.
    pub fn to_unit_tensor(&self) -> Tensor {
        let v = self.data.iter().map(|b| *b as f64 / 255.0).collect();
        Tensor::new(self.dims.clone(), v).expect("dims match payload")
    }
}

fn err(offset: usize, reason: impl Into<String>) -> DataError {
    DataError::Idx {
        offset,
        reason: reason.into(),
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData, DataError> {
    for (i, want) in [0u8, 0, TYPE_U8].iter().enumerate() {
        match bytes.get(i) {
            None => return Err(err(i, "truncated header")),
            Some(b) if b != want => return Err(err(i, format!("bad magic byte {b:#04x}, expected {want:#04x}"))),
            _ => {}
        }
    }
    let rank = *bytes.get(3).ok_or_else(|| err(3, "truncated header"))? as usize;
    let mut dims = Vec::with_capacity(rank);
    for d in 0..rank {
        let at = 4 + 4 * d;
        let b = bytes.get(at..at + 4).ok_or_else(|| err(at, "truncated extent"))?;
        dims.push(u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize);
    }
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let end = start + len;
    if bytes.len() < end {
        return Err(err(bytes.len(), format!("truncated payload: expected {len} bytes after offset {start}")));
    }
    if bytes.len() > end {
        return Err(err(end, "trailing bytes after payload"));
    }
    Ok(IdxData {
        dims,
        data: bytes[start..end].to_vec(),
    })
}

/// Reads an IDX file with pixels rescaled to `[0, 1]`.
pub fn load_idx(path: &Path) -> Result<Tensor, DataError> {
    Ok(read_idx(path)?.to_unit_tensor())
}

pub fn read_idx(path: &Path) -> Result<IdxData, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_idx(&bytes)
}

pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), data.len(), "IDX extents must match the payload");
    let mut out = vec![0, 0, TYPE_U8, dims.len() as u8];
    for d in dims {
        out.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

pub fn write_idx(path: &Path, dims: &[usize], data: &[u8]) -> Result<(), DataError> {
    std::fs::write(path, encode_idx(dims, data)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn hand_crafted_image() {
        let bytes = [0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 128, 64];
        let t = parse_idx(&bytes).unwrap().to_unit_tensor();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn bad_magic_reports_offset() {
        let bytes = [0, 0, 9, 1, 0, 0, 0, 1, 7];
        match parse_idx(&bytes) {
            Err(DataError::Idx { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("{other:?}"),
        }
        match parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 1]) {
            Err(DataError::Idx { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let data: Vec<u8> = (0..3 * 5 * 7).map(|_| rng.random()).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.idx");
        write_idx(&path, &[3, 5, 7], &data).unwrap();
        let back = read_idx(&path).unwrap();
        assert_eq!(back.dims, vec![3, 5, 7]);
        assert_eq!(back.data, data);
    }
}
