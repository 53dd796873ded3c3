//! OVCK checkpoint container.
//!
//! ```text
//! magic "OVCK", u32 entry count, then per entry:
//!   u16 name length, UTF-8 name, u8 rank, rank × u32 dims, f32 payload
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Parameters};

pub const MAGIC: &[u8; 4] = b"OVCK";

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let tensors = params.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::load(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::load(path, "bad magic, expected OVCK"));
    }
    let count = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::load(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(Error::load(path, format!("tensor `{name}` has rank {rank}"))),
        };
        let count = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::load(path, format!("tensor `{name}` size overflows")))?;
        let data = r
            .take(count)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let m = Matrix::new(rows, cols, data).map_err(|e| Error::load(path, e.to_string()))?;
        entries.push((name, m));
    }
    if r.pos != bytes.len() {
        return Err(Error::load(path, "trailing bytes after last tensor"));
    }
    ModelParams::from_named(entries).map_err(|e| Error::load(path, e.to_string()))
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KnowledgeBank, KnowledgeGroup, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> ModelParams {
        let bank = KnowledgeBank::new(
            Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap(),
            vec![KnowledgeGroup::Normal, KnowledgeGroup::Abnormal],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        ModelParams::init(3, &bank, &ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn byte_layout_header() {
        let bytes = encode_checkpoint(&params());
        assert_eq!(&bytes[..4], b"OVCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 8);
        assert_eq!(u16::from_le_bytes(bytes[8..10].try_into().unwrap()), 8);
        assert_eq!(&bytes[10..18], b"ln_gamma");
        assert_eq!(bytes[18], 2);
        assert_eq!(u32::from_le_bytes(bytes[19..23].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[23..27].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[27..31].try_into().unwrap()), 1.0);
    }

    #[test]
    fn round_trip_is_stable_after_first_narrowing() {
        let p = params();
        let once = decode_checkpoint(&encode_checkpoint(&p), Path::new("m")).unwrap();
        let bytes = encode_checkpoint(&once);
        assert_eq!(bytes, encode_checkpoint(&p));
        let twice = decode_checkpoint(&bytes, Path::new("m")).unwrap();
        assert_eq!(once, twice);
        for ((_, a), (_, b)) in p.tensors().into_iter().zip(once.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-7 * x.abs().max(1e-30));
            }
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = encode_checkpoint(&params());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 2], Path::new("m")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, Path::new("m")).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra, Path::new("m")).is_err());
        let err = load_checkpoint("/no/such/stage1.ovck").unwrap_err();
        assert!(err.to_string().contains("/no/such/stage1.ovck"));
    }
}
