//! Named parameter storage and the checkpoint container.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! magic   8 bytes  "STKRCKPT"
//! version u32      CHECKPOINT_VERSION
//! width   u8       8 = f64 values, 4 = f32 values
//! meta    u32 len + UTF-8 JSON (free-form, e.g. the model config)
//! count   u32
//! count x { name: u32 len + UTF-8, ndim: u32, dims: ndim x u64, values }
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::{FloatWidth, Real};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STKRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { params: BTreeMap::new() }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub(crate) fn get_key_value(&self, name: &str) -> Option<(&str, &Tensor<T>)> {
        self.params.get_key_value(name).map(|(k, v)| (k.as_str(), v))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, meta)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, w: &mut impl Write, meta: &str) -> Result<()> {
        let io = |e| Error::Checkpoint(format!("write failed: {e}"));
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&[T::WIDTH.bytes() as u8]).map_err(io)?;
        write_str(w, meta).map_err(io)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, t) in &self.params {
            write_str(w, name).map_err(io)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes()).map_err(io)?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            for &x in t.data() {
                match T::WIDTH {
                    FloatWidth::Wide => w.write_all(&x.to_f64_lossy().to_le_bytes()),
                    FloatWidth::Narrow => w.write_all(&(x.to_f64_lossy() as f32).to_le_bytes()),
                }
                .map_err(io)?;
            }
        }
        Ok(())
    }

    /// Loads a checkpoint, converting stored values to `T`. Returns the
    /// parameters and the metadata string.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn read_from(r: &mut impl Read) -> Result<(Self, String)> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic header".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut width = [0u8; 1];
        read_exact(r, &mut width)?;
        if width[0] != 4 && width[0] != 8 {
            return Err(Error::Checkpoint(format!("unknown value width {}", width[0])));
        }
        let meta = read_string(r)?;
        let count = read_u32(r)? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name = read_string(r)?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let v = if width[0] == 8 {
                    let mut b = [0u8; 8];
                    read_exact(r, &mut b)?;
                    f64::from_le_bytes(b)
                } else {
                    let mut b = [0u8; 4];
                    read_exact(r, &mut b)?;
                    f32::from_le_bytes(b) as f64
                };
                data.push(T::lit(v));
            }
            set.insert(name, Tensor::new(shape, data)?).map_err(|_| Error::Checkpoint("duplicate parameter name".into()))?;
        }
        Ok((set, meta))
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("non UTF-8 string".into()))
}

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with standard deviation `std`, resampled outside `[-2 std, 2 std]`.
    TruncNormal(f64),
    Const(f64),
}

impl Init {
    pub fn sample<T: Real>(self, shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = match self {
            Init::Const(c) => vec![T::lit(c); n],
            Init::TruncNormal(0.0) => vec![T::zero(); n],
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break T::lit(v);
                        }
                    })
                    .collect()
            }
        };
        Tensor::new(shape.to_vec(), data).expect("init shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::<f64>::new();
        p.insert("a.w", Init::TruncNormal(0.02).sample(&[3, 4], &mut rng)).unwrap();
        p.insert("a.b", Init::Const(0.5).sample(&[4], &mut rng)).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf, "{\"k\":1}").unwrap();
        let (q, meta) = ParamSet::<f64>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert_eq!(meta, "{\"k\":1}");
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let mut p = ParamSet::<f64>::new();
        p.insert("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf, "").unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(ParamSet::<f64>::read_from(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        let short = &buf[..buf.len() - 3];
        assert!(ParamSet::<f64>::read_from(&mut &short[..]).is_err());
    }

    #[test]
    fn narrow_checkpoint_loads_into_wide() {
        let mut p = ParamSet::<f32>::new();
        p.insert("x", Tensor::vector(vec![0.25f32, -1.5])).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf, "").unwrap();
        let (q, _) = ParamSet::<f64>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(q.get("x").unwrap().data(), &[0.25, -1.5]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::<f64>::new();
        p.insert("x", Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("x", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn truncated_normal_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t: Tensor<f64> = Init::TruncNormal(0.02).sample(&[1000], &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.005);
    }
}
