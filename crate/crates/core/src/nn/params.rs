use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named learnable tensors, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Rc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), Rc::new(t));
    }

    /// Weight of a projection with `fan_in` inputs, uniform in ±1/√fan_in.
    pub fn insert_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.insert(name, Tensor::uniform(shape, bound, rng));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|t| t.as_ref())
    }

    pub(crate) fn shared(&self, name: &str) -> Rc<Tensor> {
        Rc::clone(
            self.params
                .get(name)
                .unwrap_or_else(|| panic!("unknown parameter {name:?}")),
        )
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(Rc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }
}

/// Adam with decoupled weight decay. One-dimensional tensors (biases and
/// normalization gains) are not decayed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update. `lr_of(name)` gives the learning rate of each parameter;
    /// parameters without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr_of: impl Fn(&str) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            let lr = lr_of(name);
            let decay = if p.shape.len() > 1 { self.weight_decay } else { 0.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.data[i] -= lr * (mh / (vh.sqrt() + self.eps) + decay * p.data[i]);
            }
        }
    }
}

/// Cosine annealing from `base` to zero, restarting every `period` epochs.
/// `epoch` may be fractional.
pub fn cosine_restart_lr(base: f64, epoch: f64, period: f64) -> f64 {
    let phase = (epoch / period).fract();
    0.5 * base * (1.0 + (std::f64::consts::PI * phase).cos())
}

const MAGIC: [u8; 4] = *b"SMCK";
const VERSION: u32 = 1;

/// Contents of a checkpoint file: a text config, a JSON metadata blob and
/// named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config: String,
    pub meta: String,
    pub tensors: BTreeMap<String, Tensor>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, path: &Path) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

impl Container {
    /// Layout, all integers little-endian u32:
    /// `"SMCK" version len(config) config len(meta) meta count`
    /// then per tensor `len(name) name ndim dims… f32 values…`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config);
        put_str(&mut out, &self.meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic {
                found: magic,
                expected: MAGIC,
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let config = r.string(path)?;
        let meta = r.string(path)?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string(path)?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.insert(name, Tensor::new(&shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { config, meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_matches_hand_steps() {
        // f(x) = ½·Σ cᵢ xᵢ², gradient cᵢ xᵢ.
        let c = [1.0, 4.0];
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[1, 2], vec![1.0, -2.0]));
        let mut opt = AdamW::new(0.9, 0.95, 0.05);
        let lr = 0.1;
        let mut x = [1.0f64, -2.0];
        let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        for t in 1..=2 {
            let w = store.get("w").unwrap().clone();
            let g = Tensor::new(&[1, 2], vec![c[0] * w.data[0], c[1] * w.data[1]]);
            opt.update(&mut store, &BTreeMap::from([("w".to_string(), g)]), |_| lr);
            for i in 0..2 {
                let gi = c[i] * x[i];
                m[i] = 0.9 * m[i] + 0.1 * gi;
                v[i] = 0.95 * v[i] + 0.05 * gi * gi;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.95f64.powi(t));
                x[i] -= lr * (mh / (vh.sqrt() + 1e-8) + 0.05 * x[i]);
            }
        }
        let w = store.get("w").unwrap();
        assert!((w.data[0] - x[0]).abs() < 1e-12 && (w.data[1] - x[1]).abs() < 1e-12);
    }

    #[test]
    fn cosine_restarts() {
        assert_eq!(cosine_restart_lr(4e-4, 0.0, 20.0), 4e-4);
        assert!((cosine_restart_lr(4e-4, 10.0, 20.0) - 2e-4).abs() < 1e-15);
        assert_eq!(cosine_restart_lr(4e-4, 20.0, 20.0), 4e-4);
        assert!(cosine_restart_lr(4e-4, 19.9, 20.0) < 1e-6);
    }

    #[test]
    fn container_round_trip() {
        let mut tensors = BTreeMap::new();
        tensors.insert("a.w".to_string(), Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.25, 0.0, 3.0]));
        tensors.insert("b".to_string(), Tensor::new(&[1], vec![7.0]));
        let c = Container {
            config: "dim = 8\n".into(),
            meta: "{\"stage\":1}".into(),
            tensors,
        };
        let bytes = c.to_bytes();
        let p = Path::new("mem");
        assert_eq!(Container::from_bytes(&bytes, p).unwrap(), c);
        assert!(matches!(Container::from_bytes(&bytes[..bytes.len() - 2], p), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad, p), Err(Error::BadMagic { .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Container::from_bytes(&extra, p), Err(Error::Malformed { .. })));
    }
}
