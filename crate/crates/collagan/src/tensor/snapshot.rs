//! Binary container for named tensors, used for checkpoints and dataset
//! files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8  bytes  "COLLASNP"
//! version u32       currently 1
//! count   u64       number of tensors
//! then per tensor:
//!   name_len u64, name bytes (UTF-8)
//!   rank     u64, extents rank x u64
//!   data     product(extents) x f64 (raw IEEE-754 bits)
//! ```
//!
//! The reader treats its input as untrusted: every length is validated
//! against the remaining byte count before any allocation, and extent
//! products use checked arithmetic.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::Tensor;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"COLLASNP";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Tensors above this rank are rejected by the reader.
pub const MAX_RANK: u64 = 8;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: not a tensor snapshot")]
    BadMagic,
    #[error("unsupported snapshot version {got} (expected {expected})")]
    Version { got: u32, expected: u32 },
    #[error("truncated snapshot: needed {needed} more bytes for {what}")]
    Truncated { what: &'static str, needed: usize },
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("tensor rank {0} exceeds limit {MAX_RANK}")]
    RankTooLarge(u64),
    #[error("tensor extent product overflows")]
    ExtentOverflow,
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("snapshot has no tensor named {0:?}")]
    Missing(String),
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
}

/// Ordered collection of named tensors.
#[derive(Default, Clone, Debug, PartialEq)]
pub struct Snapshot {
    entries: Vec<(String, Tensor)>,
}

impl Snapshot {
    pub fn new() -> Self {
        Snapshot::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, SnapshotError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| SnapshotError::Missing(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.shape().len() as u64).to_le_bytes());
            for &e in tensor.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decode a snapshot from raw bytes. Never panics on malformed input.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SnapshotError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != SNAPSHOT_MAGIC {
            return Err(SnapshotError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != SNAPSHOT_VERSION {
            return Err(SnapshotError::Version { got: version, expected: SNAPSHOT_VERSION });
        }
        let count = r.u64("tensor count")?;
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        for _ in 0..count {
            let name_len = r.u64("name length")?;
            let name_bytes = r.take_checked(name_len, "tensor name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| SnapshotError::BadName)?
                .to_string();
            if entries.iter().any(|(n, _)| *n == name) {
                return Err(SnapshotError::DuplicateName(name));
            }
            let rank = r.u64("rank")?;
            if rank > MAX_RANK {
                return Err(SnapshotError::RankTooLarge(rank));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let e = r.u64("extent")?;
                numel = numel.checked_mul(e).ok_or(SnapshotError::ExtentOverflow)?;
                shape.push(e as usize);
            }
            let byte_len = numel.checked_mul(8).ok_or(SnapshotError::ExtentOverflow)?;
            let raw = r.take_checked(byte_len, "tensor data")?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::new(shape, data).expect("validated extent product");
            entries.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(SnapshotError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Snapshot { entries })
    }

    pub fn write_file(&self, path: &Path) -> Result<(), SnapshotError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, SnapshotError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], SnapshotError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(SnapshotError::Truncated { what, needed: n - remaining });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    /// Like `take` but for u64 lengths that may exceed usize or the buffer.
    fn take_checked(&mut self, n: u64, what: &'static str) -> Result<&'a [u8], SnapshotError> {
        let remaining = (self.bytes.len() - self.pos) as u64;
        if remaining < n {
            return Err(SnapshotError::Truncated {
                what,
                needed: (n - remaining).min(usize::MAX as u64) as usize,
            });
        }
        self.take(n as usize, what)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Snapshot {
        let mut s = Snapshot::new();
        s.insert("alpha", Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, f64::MIN_POSITIVE, 9.9]).unwrap());
        s.insert("beta/w", Tensor::scalar(-0.125));
        s
    }

    #[test]
    fn round_trips_bitwise() {
        let s = sample();
        let decoded = Snapshot::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(s, decoded);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = sample().to_bytes();
        bytes[0] ^= 0xff;
        assert!(matches!(Snapshot::from_bytes(&bytes), Err(SnapshotError::BadMagic)));
    }

    #[test]
    fn rejects_version_mismatch() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 99;
        assert!(matches!(
            Snapshot::from_bytes(&bytes),
            Err(SnapshotError::Version { got: 99, .. })
        ));
    }

    #[test]
    fn rejects_truncation_without_allocating() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 9, 20, 12, 9, 3] {
            assert!(Snapshot::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn rejects_huge_claimed_lengths() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(SNAPSHOT_MAGIC);
        bytes.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes()); // absurd name length
        assert!(matches!(
            Snapshot::from_bytes(&bytes),
            Err(SnapshotError::Truncated { .. })
        ));
    }

    #[test]
    fn rejects_extent_overflow() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(SNAPSHOT_MAGIC);
        bytes.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&2u64.to_le_bytes()); // rank 2
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        assert!(matches!(
            Snapshot::from_bytes(&bytes),
            Err(SnapshotError::ExtentOverflow)
        ));
    }

    #[test]
    fn missing_name_is_reported() {
        let s = sample();
        assert!(matches!(s.get("gamma"), Err(SnapshotError::Missing(_))));
    }

    #[test]
    fn rejects_trailing_bytes() {
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(matches!(
            Snapshot::from_bytes(&bytes),
            Err(SnapshotError::TrailingBytes(1))
        ));
    }
}
