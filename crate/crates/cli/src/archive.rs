//! Binary run archive.
//!
//! Layout, little-endian:
//!
//! | field            | encoding                                  |
//! |------------------|-------------------------------------------|
//! | magic            | `b"SVEARCH\0"`                            |
//! | format version   | `u16`                                     |
//! | tool version     | `u32` length + UTF-8                      |
//! | config           | `u32` length + UTF-8 TOML                 |
//! | seed             | `u64`                                     |
//! | statistics       | `u32` count, then `u16` length + UTF-8 name and `f64` per entry |
//! | digest           | SHA-256 of every byte above except the seed |
//!
//! The seed sits outside the digest so that an archive re-seeded by hand
//! still loads and fails replay as a statistics mismatch.

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"SVEARCH\0";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive is corrupt: {0}")]
    Corrupt(String),
    #[error("cannot access archive: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArchive {
    pub tool_version: String,
    pub config: String,
    pub seed: u64,
    pub statistics: Vec<(String, f64)>,
}

impl RunArchive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = Vec::new();
        head.extend_from_slice(MAGIC);
        head.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str32(&mut head, &self.tool_version);
        put_str32(&mut head, &self.config);
        let mut tail = Vec::new();
        tail.extend_from_slice(&(self.statistics.len() as u32).to_le_bytes());
        for (name, value) in &self.statistics {
            tail.extend_from_slice(&(name.len() as u16).to_le_bytes());
            tail.extend_from_slice(name.as_bytes());
            tail.extend_from_slice(&value.to_le_bytes());
        }
        let digest = Sha256::new().chain_update(&head).chain_update(&tail).finalize();
        let mut out = head;
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&tail);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ArchiveError::Corrupt("missing archive header".into()));
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let version = u16::from_le_bytes(r.take()?);
        if version != FORMAT_VERSION {
            return Err(ArchiveError::Corrupt(format!("unsupported format version {version}")));
        }
        let tool_version = r.str32()?;
        let config = r.str32()?;
        let seed_at = r.pos;
        let seed = u64::from_le_bytes(r.take()?);
        let count = u32::from_le_bytes(r.take()?) as usize;
        let mut statistics = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take()?) as usize;
            let name = r.utf8(len)?;
            statistics.push((name, f64::from_le_bytes(r.take()?)));
        }
        let body_end = r.pos;
        let stored: [u8; 32] = r.take()?;
        if r.pos != bytes.len() {
            return Err(ArchiveError::Corrupt("trailing bytes after digest".into()));
        }
        let digest = Sha256::new()
            .chain_update(&bytes[..seed_at])
            .chain_update(&bytes[seed_at + 8..body_end])
            .finalize();
        if digest.as_slice() != stored {
            return Err(ArchiveError::Corrupt("checksum mismatch".into()));
        }
        Ok(Self {
            tool_version,
            config,
            seed,
            statistics,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), ArchiveError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn read(path: &Path) -> Result<Self, ArchiveError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_str32(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn slice(&mut self, len: usize) -> Result<&[u8], ArchiveError> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ArchiveError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], ArchiveError> {
        Ok(self.slice(N)?.try_into().expect("length checked"))
    }

    fn utf8(&mut self, len: usize) -> Result<String, ArchiveError> {
        String::from_utf8(self.slice(len)?.to_vec()).map_err(|_| ArchiveError::Corrupt("invalid UTF-8".into()))
    }

    fn str32(&mut self) -> Result<String, ArchiveError> {
        let len = u32::from_le_bytes(self.take()?) as usize;
        self.utf8(len)
    }
}
