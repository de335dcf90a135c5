//! Named-tensor checkpoint files.
//!
//! ```text
//! magic        b"QTCK"
//! version      u32
//! meta_len     u32, then meta_len bytes of UTF-8 (JSON)
//! count        u32
//! count x      name_len u32, name bytes, rank u32, rank x dim u32
//! payload      every tensor's values as f64, in table order
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"QTCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no tensor named {0:?}")]
    Missing(String),
    #[error("tensor {name:?}: expected shape {expected:?}, found {found:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("refusing to overwrite existing checkpoint {0}")]
    Exists(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn from_named(meta: String, named: &[(String, Tensor)]) -> Self {
        let tensors = named
            .iter()
            .map(|(name, t)| StoredTensor { name: name.clone(), shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect();
        Self { meta, tensors }
    }

    pub fn get(&self, name: &str, shape: &[usize]) -> Result<&StoredTensor, CheckpointError> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if t.shape != shape {
            return Err(CheckpointError::Shape { name: name.into(), expected: shape.to_vec(), found: t.shape.clone() });
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.meta.len() as u32);
        out.extend_from_slice(self.meta.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_u32(&mut out, t.name.len() as u32);
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len() as u32);
            for &d in &t.shape {
                put_u32(&mut out, d as u32);
            }
        }
        for t in &self.tensors {
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            table.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, shape) in table {
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(StoredTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { meta, tensors })
    }

    /// Writes to `path`, failing if something already exists there.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if path.exists() {
            return Err(CheckpointError::Exists(path.display().to_string()));
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: "{\"kind\":\"test\"}".into(),
            tensors: vec![
                StoredTensor { name: "a".into(), shape: vec![2, 2], data: vec![1.0, -0.5, f64::MIN_POSITIVE, 3.25] },
                StoredTensor { name: "b.bias".into(), shape: vec![3], data: vec![0.0, 1e300, -7.0] },
                StoredTensor { name: "s".into(), shape: vec![], data: vec![42.0] },
            ],
        }
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"QTCK");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        // payload is the last 8 values
        let tail = &b[b.len() - 8..];
        assert_eq!(f64::from_le_bytes(tail.try_into().unwrap()), 42.0);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let b = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&b[..b.len() - 1]), Err(CheckpointError::Truncated)));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Version(9))));
        let mut long = b;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(CheckpointError::Malformed(_))));
    }

    #[test]
    fn lookup_checks_shape() {
        let c = sample();
        assert!(c.get("a", &[2, 2]).is_ok());
        assert!(matches!(c.get("a", &[4]), Err(CheckpointError::Shape { .. })));
        assert!(matches!(c.get("zzz", &[1]), Err(CheckpointError::Missing(_))));
    }

    #[test]
    fn save_never_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.qtck");
        sample().save(&path).unwrap();
        assert!(matches!(sample().save(&path), Err(CheckpointError::Exists(_))));
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 0..40), meta in ".{0,20}") {
            let c = Checkpoint {
                meta,
                tensors: vec![StoredTensor { name: "w".into(), shape: vec![values.len()], data: values }],
            };
            prop_assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
        }
    }
}
