//! OVFF feature files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   "OVFF"         4 bytes
//! version u32 = 1
//! rows    u32
//! cols    u32
//! payload rows·cols f32, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub const MAGIC: &[u8; 4] = b"OVFF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Frames per sampled feature row.
pub const DEFAULT_STRIDE: usize = 16;

/// Per-sampled-frame embeddings of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub features: Matrix,
    pub stride: usize,
    pub original_frame_count: usize,
}

impl FeatureSequence {
    /// Wraps a matrix with the default stride and a frame count of `n·stride`.
    pub fn new(features: Matrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Degenerate("feature sequence with zero frames".into()));
        }
        let original_frame_count = features.rows() * DEFAULT_STRIDE;
        Ok(Self {
            features,
            stride: DEFAULT_STRIDE,
            original_frame_count,
        })
    }

    pub fn with_sampling(features: Matrix, stride: usize, original_frame_count: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        let mut seq = Self::new(features)?;
        seq.stride = stride;
        seq.original_frame_count = original_frame_count;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::load(path, format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::load(
            path,
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4])),
        ));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
    let version = word(4);
    if version != VERSION {
        return Err(Error::load(path, format!("unsupported version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::load(path, format!("{rows}x{cols} overflows")))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != payload {
        return Err(Error::load(
            path,
            format!(
                "payload is {} bytes, header declares {rows}x{cols} ({payload} bytes)",
                body.len()
            ),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Matrix::new(rows, cols, data).map_err(|e| Error::load(path, e.to_string()))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes, path)
}

/// Values are narrowed to f32 on disk.
pub fn write_matrix(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let m = read_matrix(path)?;
    FeatureSequence::new(m).map_err(|e| Error::load(path, e.to_string()))
}

pub fn write_features(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    write_matrix(&seq.features, path)
}
