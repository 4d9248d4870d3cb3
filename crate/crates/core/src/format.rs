//! The DMC1 container.
//!
//! ```text
//! "DMC1"                      4 bytes magic
//! version: u8                 = 1
//! rank: u32
//! dims: rank x u64            (N, C, H, W for image sets)
//! labels: N x u32             N = dims[0]
//! values: prod(dims) x f32
//! meta_len: u32
//! meta: meta_len bytes        UTF-8 JSON
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DMC1";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub dims: Vec<u64>,
    pub labels: Vec<u32>,
    pub values: Vec<f32>,
    /// Raw JSON metadata bytes.
    pub metadata: Vec<u8>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Container {
    pub fn new(dims: Vec<u64>, labels: Vec<u32>, values: Vec<f32>, metadata: Vec<u8>) -> Result<Self> {
        let c = Self {
            dims,
            labels,
            values,
            metadata,
        };
        c.check()?;
        Ok(c)
    }

    fn check(&self) -> Result<()> {
        let n = *self
            .dims
            .first()
            .ok_or_else(|| Error::Format("rank must be at least 1".into()))?;
        if self.labels.len() as u64 != n {
            return Err(Error::Format(format!("{} labels for leading dimension {n}", self.labels.len())));
        }
        let count = self
            .dims
            .iter()
            .try_fold(1u64, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
        if self.values.len() as u64 != count {
            return Err(Error::Format(format!("{} values for dims {:?}", self.values.len(), self.dims)));
        }
        std::str::from_utf8(&self.metadata).map_err(|e| Error::Format(format!("metadata is not UTF-8: {e}")))?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(13 + 8 * self.dims.len() + 4 * (self.labels.len() + self.values.len()) + self.metadata.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.metadata);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic, not a DMC1 file".into()));
        }
        let version = r.take(1, "version")?[0];
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("unsupported rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u64("dims")).collect::<Result<Vec<_>>>()?;
        let n = usize::try_from(dims[0]).map_err(|_| Error::Format("leading dimension too large".into()))?;
        let count = dims
            .iter()
            .try_fold(1u64, |acc, d| acc.checked_mul(*d))
            .and_then(|c| usize::try_from(c).ok())
            .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
        // Reject absurd headers before allocating.
        let needed = n.saturating_mul(4).saturating_add(count.saturating_mul(4));
        if needed > bytes.len() {
            return Err(Error::Format("truncated: header promises more data than the file holds".into()));
        }
        let labels = r
            .take(4 * n, "labels")?
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let values = r
            .take(4 * count, "values")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let meta_len = r.u32("metadata length")? as usize;
        let metadata = r.take(meta_len, "metadata")?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Self::new(dims, labels, values, metadata)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn metadata_as<M: for<'de> Deserialize<'de>>(&self) -> Result<M> {
        serde_json::from_slice(&self.metadata).map_err(|e| Error::Format(format!("metadata: {e}")))
    }

    pub fn with_metadata<M: Serialize>(mut self, meta: &M) -> Result<Self> {
        self.metadata = serde_json::to_vec(meta)?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sample() -> Container {
        Container::new(vec![2, 1, 1, 2], vec![0, 1], vec![1.0, -2.5, 0.0, 3.25], br#"{"k":1}"#.to_vec()).unwrap()
    }

    #[test]
    fn layout_is_exact() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"DMC1");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..9], &4u32.to_le_bytes());
        assert_eq!(&bytes[9..17], &2u64.to_le_bytes());
        // labels start after 4 dims
        let lab = 9 + 32;
        assert_eq!(&bytes[lab..lab + 4], &0u32.to_le_bytes());
        assert_eq!(&bytes[lab + 4..lab + 8], &1u32.to_le_bytes());
        let vals = lab + 8;
        assert_eq!(&bytes[vals + 4..vals + 8], &(-2.5f32).to_le_bytes());
        let meta = vals + 16;
        assert_eq!(&bytes[meta..meta + 4], &7u32.to_le_bytes());
        assert_eq!(&bytes[meta + 4..], br#"{"k":1}"#);
    }

    #[test]
    fn truncation_is_rejected_at_every_length() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            assert!(matches!(Container::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(Container::from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(n in 1u64..4, c in 1u64..3, bits in prop::collection::vec(any::<u32>(), 0..64), meta in "[a-z]{0,12}") {
            let count = (n * c * 2 * 2) as usize;
            let values: Vec<f32> = (0..count).map(|i| f32::from_bits(bits.get(i).copied().unwrap_or(i as u32))).collect();
            let labels: Vec<u32> = (0..n as u32).collect();
            let cont = Container::new(vec![n, c, 2, 2], labels, values, meta.into_bytes()).unwrap();
            let back = Container::from_bytes(&cont.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), cont.to_bytes());
        }
    }
}
