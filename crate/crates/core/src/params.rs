//! Named parameter sets: deterministic iteration, seeded initialization, and
//! a small binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian u32): the magic `SDRK1`,
//! the parameter count, then per parameter its name length, UTF-8 name,
//! rank, dims, and `f32` little-endian payload. Values are stored as `f32`
//! regardless of the in-memory scalar type; an `f32` set round-trips bit for
//! bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::SdrError;
use crate::tensor::{Scalar, Tensor};
use crate::Result;

const MAGIC: &[u8; 5] = b"SDRK1";

/// Ordered collection of named tensors. Iteration order is the sorted name
/// order, so optimizer updates and serialization are deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T: Scalar> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| SdrError::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| SdrError::Config(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.params.remove(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Serializes to the checkpoint format, writing through a temporary file
    /// in the same directory so the destination is never half-written.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in &self.params {
            let bytes = name.as_bytes();
            buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            buf.extend_from_slice(bytes);
            buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: String) -> SdrError {
        SdrError::Parse {
            path: self.path.display().to_string(),
            line: 0,
            msg,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize)
    }
}

impl ParamSet<f32> {
    /// Reads a checkpoint written by [`ParamSet::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if cur.take(5)? != MAGIC {
            return Err(cur.err("bad magic, not a parameter checkpoint".into()));
        }
        let count = cur.u32()?;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let name_len = cur.u32()?;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|e| cur.err(format!("parameter name is not UTF-8: {e}")))?
                .to_string();
            let rank = cur.u32()?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()?);
            }
            let len: usize = shape.iter().product();
            let raw = cur.take(len * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(name, Tensor::from_vec(&shape, data)?);
        }
        if cur.pos != bytes.len() {
            return Err(cur.err(format!("trailing bytes after {count} parameters")));
        }
        Ok(ParamSet { params })
    }
}

/// Uniform tensor on `(-bound, bound)`, drawn in `f64` so the same seed
/// produces matching values for every scalar type.
pub fn uniform_tensor<T: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let len: usize = shape.iter().product();
    let data: Vec<T> = (0..len)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Standard fan-in scaled initialization for a convolution weight: uniform
/// on `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn conv_init<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    uniform_tensor(rng, shape, (1.0 / fan_in as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let mut set = ParamSet::<f32>::new();
        set.insert(
            "w.conv",
            Tensor::from_vec(&[2, 1, 1, 1], vec![0.1, -3.7]).unwrap(),
        );
        set.insert("b", Tensor::from_vec(&[2], vec![1.0e-8, 42.0]).unwrap());
        set.insert("scalar", Tensor::from_vec(&[], vec![7.25]).unwrap());
        set.save(&path).unwrap();
        let loaded = ParamSet::load(&path).unwrap();
        assert_eq!(set, loaded);
    }

    #[test]
    fn f64_sets_store_as_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let mut set = ParamSet::<f64>::new();
        set.insert("x", Tensor::from_vec(&[1], vec![0.1f64]).unwrap());
        set.save(&path).unwrap();
        let loaded = ParamSet::load(&path).unwrap();
        assert_eq!(loaded.get("x").unwrap().data()[0], 0.1f32);
    }

    #[test]
    fn load_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.bin");
        fs::write(&bad, b"NOPE!rest").unwrap();
        assert!(matches!(
            ParamSet::load(&bad),
            Err(SdrError::Parse { .. })
        ));

        let mut set = ParamSet::<f32>::new();
        set.insert("x", Tensor::from_vec(&[4], vec![1.0; 4]).unwrap());
        let good = dir.path().join("good.bin");
        set.save(&good).unwrap();
        let full = fs::read(&good).unwrap();
        let cut = dir.path().join("cut.bin");
        fs::write(&cut, &full[..full.len() - 3]).unwrap();
        assert!(matches!(
            ParamSet::load(&cut),
            Err(SdrError::Parse { .. })
        ));
    }

    #[test]
    fn seeded_init_matches_across_scalar_types() {
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let a: Tensor<f32> = conv_init(&mut r1, &[3, 2, 1, 1], 2);
        let b: Tensor<f64> = conv_init(&mut r2, &[3, 2, 1, 1], 2);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
