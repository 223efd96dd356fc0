//! Binary checkpoint format.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "SQEXCKPT"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      8     header length H in bytes, u64 little-endian
//! 20      H     UTF-8 JSON header: {"config": {...}, "tensors": [{"name", "rows", "cols"}, ...]}
//! 20+H    ...   tensor payloads in header order; each is rows*cols f64
//!               values, IEEE-754 little-endian, row-major
//! ```
//!
//! Values are stored bit-for-bit, so `load(save(w)) == w` exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::weights::EncoderWeights;
use crate::error::{Error, Result};
use crate::math::Matrix;

pub const MAGIC: &[u8; 8] = b"SQEXCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(weights: &EncoderWeights) -> Result<Vec<u8>> {
    let header = Header {
        config: weights.config().clone(),
        tensors: weights
            .tensors()
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                rows: t.value.rows(),
                cols: t.value.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + weights.num_parameters() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in weights.tensors() {
        for v in t.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<EncoderWeights> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20usize.saturating_add(header_len))
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut offset = 20 + header_len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n = entry.rows * entry.cols;
        let chunk = bytes
            .get(offset..offset + n * 8)
            .ok_or_else(|| Error::Checkpoint(format!("truncated payload for {}", entry.name)))?;
        let data = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += n * 8;
        tensors.push((entry.name, Matrix::new(entry.rows, entry.cols, data)?));
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    EncoderWeights::from_tensors(&header.config, tensors)
}

pub fn save(weights: &EncoderWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(weights)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<EncoderWeights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            num_labels: 3,
            vocab_size: 9,
            max_len: 7,
        };
        let mut w = EncoderWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        // awkward values survive too
        w.tensors_mut()[0].value.data_mut()[0] = -0.0;
        w.tensors_mut()[0].value.data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        save(&w, &path).unwrap();
        let back = load(&path).unwrap();
        for (a, b) in w.tensors().iter().zip(back.tensors()) {
            let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(back, w);
    }

    #[test]
    fn rejects_corruption() {
        let cfg = ModelConfig {
            num_layers: 1,
            hidden_dim: 4,
            num_heads: 1,
            ffn_dim: 4,
            num_labels: 2,
            vocab_size: 3,
            max_len: 3,
        };
        let w = EncoderWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bytes = to_bytes(&w).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(from_bytes(&bad).is_err());
    }
}
