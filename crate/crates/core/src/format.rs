//! The `MMEB` embedding container.
//!
//! Layout (little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `MMEB`                  |
//! | 4      | 4    | version (u32, = 1)            |
//! | 8      | 4    | N examples (u32)              |
//! | 12     | 4    | T tokens per example (u32)    |
//! | 16     | 4    | D dims per token (u32)        |
//! | 20     | 1    | dtype (u8, 1 = f32)           |
//! | 21     | 3    | zero padding                  |
//! | 24     | …    | N·T·D f32, example/token/dim  |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MMEB";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub n: usize,
    pub tokens: usize,
    pub dim: usize,
    /// Example-major, then token, then dim.
    pub values: Vec<f32>,
}

impl EmbeddingFile {
    pub fn example(&self, i: usize) -> &[f32] {
        let stride = self.tokens * self.dim;
        &self.values[i * stride..(i + 1) * stride]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.values.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.n, self.tokens, self.dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(DTYPE_F32);
        out.resize(HEADER_LEN, 0);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[0..4] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "bad magic, expected `MMEB`".into(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncation {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                detail: format!("unsupported version {version}"),
            });
        }
        let (n, tokens, dim) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        if bytes[20] != DTYPE_F32 {
            return Err(Error::Format {
                offset: 20,
                detail: format!("unsupported dtype {}", bytes[20]),
            });
        }
        let expected = (HEADER_LEN + n * tokens * dim * 4) as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::Truncation {
                expected,
                found: bytes.len() as u64,
            });
        }
        let values: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: (HEADER_LEN + 4 * i) as u64,
                detail: "non-finite value".into(),
            });
        }
        Ok(Self {
            n,
            tokens,
            dim,
            values,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
