//! Binary checkpoint format:
//!
//! ```text
//! "NNKD" | u32 version | u64 header length | TOML header | f64 data … | u64 checksum
//! ```
//!
//! All integers and floats are little-endian. The checksum is the first eight
//! bytes of the SHA-256 digest of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{ArchConfig, RecommenderParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NNKD";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 4 + 4 + 8;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderTensor {
    name: String,
    shape: Vec<usize>,
    byte_offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    writer: String,
    n_values: usize,
    arch: ArchConfig,
    tensors: Vec<HeaderTensor>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn encode_checkpoint(params: &RecommenderParams) -> Result<Vec<u8>> {
    let header = Header {
        writer: format!("adakde {}", env!("CARGO_PKG_VERSION")),
        n_values: params.len(),
        arch: params.arch().clone(),
        tensors: params
            .manifest()
            .iter()
            .map(|t| HeaderTensor { name: t.name.clone(), shape: t.shape.clone(), byte_offset: 8 * t.offset })
            .collect(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let mut out = Vec::with_capacity(PREFIX + text.len() + 8 * params.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<RecommenderParams> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("missing magic bytes".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < PREFIX {
        return Err(Error::Truncated("incomplete preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(PREFIX))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Truncated(format!("header of {header_len} bytes does not fit in {} bytes", bytes.len())))?;

    let verify = || -> Result<()> {
        if bytes.len() < header_end + 8 {
            return Err(Error::Truncated("missing checksum".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let computed = checksum(body);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        Ok(())
    };

    let header: Header = match std::str::from_utf8(&bytes[PREFIX..header_end])
        .map_err(|e| e.to_string())
        .and_then(|s| toml::from_str(s).map_err(|e| e.to_string()))
    {
        Ok(h) => h,
        Err(msg) => {
            // A damaged header is reported as corruption when the checksum disagrees.
            verify()?;
            return Err(Error::MalformedHeader(msg));
        }
    };
    let expected_len = header
        .n_values
        .checked_mul(8)
        .and_then(|b| b.checked_add(header_end + 8))
        .ok_or_else(|| Error::MalformedHeader("value count overflows".into()))?;
    if bytes.len() < expected_len {
        return Err(Error::Truncated(format!("expected {expected_len} bytes, found {}", bytes.len())));
    }
    if bytes.len() > expected_len {
        verify()?;
        return Err(Error::MalformedHeader(format!("{} trailing bytes", bytes.len() - expected_len)));
    }
    verify()?;

    let values: Vec<f64> = bytes[header_end..header_end + 8 * header.n_values]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let params = RecommenderParams::from_values(header.arch, values)?;
    let consistent = params.manifest().len() == header.tensors.len()
        && params
            .manifest()
            .iter()
            .zip(&header.tensors)
            .all(|(a, b)| a.name == b.name && a.shape == b.shape && 8 * a.offset == b.byte_offset);
    if !consistent {
        return Err(Error::MalformedHeader("tensor manifest does not match the architecture".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &RecommenderParams, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<RecommenderParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kde::SampleMatrix;
    use crate::recommender::neighborhoods::extract_neighborhoods;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize) -> RecommenderParams {
        RecommenderParams::init(ArchConfig::desk(d), &mut ChaCha8Rng::seed_from_u64(d as u64)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nnkd");
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p.arch(), q.arch());
        assert!(p.values().iter().zip(q.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&params(2)).unwrap();
        let mut flipped = bytes.clone();
        let k = bytes.len() - 100;
        flipped[k] ^= 0x10;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::ChecksumMismatch { .. })));

        let mut header_hit = bytes.clone();
        header_hit[PREFIX + 3] ^= 0x01;
        assert!(matches!(decode_checkpoint(&header_hit), Err(Error::ChecksumMismatch { .. })));

        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 9]), Err(Error::Truncated(_))));
        assert!(matches!(decode_checkpoint(&bytes[..10]), Err(Error::Truncated(_))));

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(decode_checkpoint(&version), Err(Error::VersionMismatch { found: 9, expected: 1 })));

        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&magic), Err(Error::BadMagic)));
    }

    #[test]
    fn loaded_model_guards_dimension() {
        let q = decode_checkpoint(&encode_checkpoint(&params(2)).unwrap()).unwrap();
        let s3 = SampleMatrix::from_flat(20, 3, (0..60).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let nbh = extract_neighborhoods(&s3, 16).unwrap();
        assert!(matches!(q.recommend(&nbh[0], None), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_checkpoint(Path::new("/nonexistent/model.nnkd")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/model.nnkd"));
    }
}
