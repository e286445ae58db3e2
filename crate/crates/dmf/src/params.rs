//! Named parameter collections and their binary checkpoint format.
//!
//! A checkpoint is `DMF1` magic, one variant byte, a `u32` tensor count,
//! then per tensor: `u16` name length, UTF-8 name, `u8` rank, each dim as
//! `u64`, and the payload as little-endian `f32`. Everything is
//! little-endian and insertion-ordered, so a save/load cycle is
//! byte-identical.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use indexmap::IndexMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DMF1";

/// Insertion-ordered map of parameter name to tensor.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<P: Scalar> {
    entries: IndexMap<String, Tensor<P>>,
}

impl<P: Scalar> ParamSet<P> {
    pub fn new() -> Self {
        ParamSet {
            entries: IndexMap::new(),
        }
    }

    /// Registers a tensor under `name`; the tensor is marked as requiring
    /// gradients. Re-registering a name is a bug.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<P>) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), tensor.with_requires_grad());
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<P>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<P>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<P>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<P>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.clear_grad();
        }
    }

    /// Writes the set to `path` with the given variant tag byte.
    pub fn save(&self, path: &Path, variant: u8) -> Result<()> {
        let wrap = |source| Error::FileWrite {
            path: path.to_path_buf(),
            source,
        };
        let file = std::fs::File::create(path).map_err(wrap)?;
        let mut w = BufWriter::new(file);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(wrap);
        put(&CHECKPOINT_MAGIC)?;
        put(&[variant])?;
        put(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.entries {
            put(&(name.len() as u16).to_le_bytes())?;
            put(name.as_bytes())?;
            put(&[tensor.shape().len() as u8])?;
            for &d in tensor.shape() {
                put(&(d as u64).to_le_bytes())?;
            }
            for &v in tensor.data() {
                put(&(v.to_f64() as f32).to_le_bytes())?;
            }
        }
        w.flush().map_err(wrap)
    }

    /// Reads a checkpoint, returning the variant tag byte and the set.
    pub fn load(path: &Path) -> Result<(u8, Self)> {
        let wrap = |source| Error::FileRead {
            path: path.to_path_buf(),
            source,
        };
        let file = std::fs::File::open(path).map_err(wrap)?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(wrap)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte).map_err(wrap)?;
        let variant = byte[0];
        let mut count4 = [0u8; 4];
        r.read_exact(&mut count4).map_err(wrap)?;
        let count = u32::from_le_bytes(count4) as usize;

        let mut set = ParamSet::new();
        for _ in 0..count {
            let mut len2 = [0u8; 2];
            r.read_exact(&mut len2).map_err(wrap)?;
            let mut name_bytes = vec![0u8; u16::from_le_bytes(len2) as usize];
            r.read_exact(&mut name_bytes).map_err(wrap)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::CheckpointMismatch(format!("non-UTF-8 name: {e}")))?;
            r.read_exact(&mut byte).map_err(wrap)?;
            let rank = byte[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut d8 = [0u8; 8];
                r.read_exact(&mut d8).map_err(wrap)?;
                shape.push(u64::from_le_bytes(d8) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut f4 = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut f4).map_err(wrap)?;
                data.push(P::from_f64(f32::from_le_bytes(f4) as f64));
            }
            if set.contains(&name) {
                return Err(Error::CheckpointMismatch(format!(
                    "duplicate parameter {name}"
                )));
            }
            set.insert(name, Tensor::from_vec(shape, data)?);
        }
        if r.read(&mut byte).map_err(wrap)? != 0 {
            return Err(Error::CheckpointMismatch(
                "trailing bytes after last tensor".into(),
            ));
        }
        Ok((variant, set))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![2, 3], (0..6).map(|i| i as f32 * 0.5).collect()).unwrap());
        p.insert("b", Tensor::from_vec(vec![3], vec![-1.0, 0.25, 7.0]).unwrap());
        p
    }

    #[test]
    fn save_load_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dmf");
        let p = sample();
        p.save(&path, 3).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();

        let (variant, q) = ParamSet::<f32>::load(&path).unwrap();
        assert_eq!(variant, 3);
        assert_eq!(q.len(), p.len());
        for (name, t) in p.iter() {
            assert_eq!(q.get(name).unwrap(), t);
        }
        // Names keep their insertion order through a round trip.
        let names: Vec<_> = q.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["w", "b"]);

        let path2 = dir.path().join("model2.dmf");
        q.save(&path2, 3).unwrap();
        assert_eq!(bytes1, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dmf");
        sample().save(&path, 0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        match ParamSet::<f32>::load(&path) {
            Err(Error::BadMagic { found, .. }) => assert_eq!(&found, b"XMF1"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dmf");
        sample().save(&path, 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(ParamSet::<f32>::load(&path).is_err());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dmf");
        sample().save(&path, 0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            ParamSet::<f32>::load(&path),
            Err(Error::CheckpointMismatch(_))
        ));
    }
}
