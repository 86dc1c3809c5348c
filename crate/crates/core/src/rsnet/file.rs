//! Binary parameter files.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic     4 bytes  "RSNT"
//! version   u32      FORMAT_VERSION
//! blocks    u32      B
//! channels  u32      C
//! clip      f64
//! boundary  u8       0 = replicate, 1 = grid
//! kernels   f64 x (9C + 9C^2 B + 9C)
//! ```
//!
//! Kernels are stored input bank, block banks 1..B, output bank, each as
//! `[out][in][ky][kx]` in row-major order. Trailing bytes are an error.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Boundary, RsnetParams};

pub const MAGIC: &[u8; 4] = b"RSNT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 1;

impl RsnetParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blocks() as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels() as u32).to_le_bytes());
        out.extend_from_slice(&self.clip().to_le_bytes());
        out.push(self.boundary().to_byte());
        for w in self.as_slice() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::CorruptParams(format!(
                "{} bytes is shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::CorruptParams("bad magic".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let blocks = u32_at(8) as usize;
        let channels = u32_at(12) as usize;
        let clip = f64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
        let boundary = Boundary::from_byte(bytes[24])?;
        let count = RsnetParams::param_count_for(blocks, channels);
        let body = &bytes[HEADER_LEN..];
        if body.len() != 8 * count {
            return Err(Error::CorruptParams(format!(
                "expected {count} weights for B={blocks}, C={channels}, found {} bytes",
                body.len()
            )));
        }
        let weights = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        RsnetParams::from_weights(blocks, channels, clip, boundary, weights)
            .map_err(|e| Error::CorruptParams(e.to_string()))
    }
}

pub fn save_params(p: &RsnetParams, path: &Path) -> Result<()> {
    fs::write(path, p.to_bytes())?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<RsnetParams> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    RsnetParams::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rsnet::DEFAULT_CLIP;

    #[test]
    fn round_trip_is_bit_exact() {
        let p = RsnetParams::random(3, 5, DEFAULT_CLIP, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.rsnt");
        save_params(&p, &path).unwrap();
        let q = load_params(&path).unwrap();
        assert_eq!(p, q);
        assert!(p.as_slice().iter().zip(q.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn ten_block_sixteen_channel_file_length() {
        let p = RsnetParams::zeros(10, 16, DEFAULT_CLIP, Boundary::Replicate).unwrap();
        assert_eq!(p.param_count(), 23328);
        assert_eq!(p.to_bytes().len(), HEADER_LEN + 8 * 23328);
    }

    #[test]
    fn truncated_and_tampered_files_fail() {
        let bytes = RsnetParams::random(1, 2, 1.0, 0).unwrap().to_bytes();
        assert!(matches!(
            RsnetParams::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::CorruptParams(_))
        ));
        assert!(matches!(RsnetParams::from_bytes(&bytes[..10]), Err(Error::CorruptParams(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            RsnetParams::from_bytes(&bad),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(RsnetParams::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[24] = 7;
        assert!(RsnetParams::from_bytes(&bad).is_err());
        assert!(matches!(
            load_params(Path::new("/nonexistent/net.rsnt")),
            Err(Error::MissingFile(_))
        ));
    }
}
