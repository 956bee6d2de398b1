//! Named parameter storage, Adam state and checkpoints.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "TTP1" | u8 scalar width (4 or 8) | u32 tensor count
//! per tensor: u32 name length | name bytes | u8 trainable | u32 rank | rank x u64 dims | values
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{EngineError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"TTP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Present iff the parameter is trainable.
    pub grad: Option<Vec<T>>,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Trainable parameters and non-trainable buffers (batch norm running
/// statistics), in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
    step: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(EngineError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.params.len());
        let n = value.numel();
        let (grad, m, v) = if trainable {
            (Some(vec![T::zero(); n]), vec![T::zero(); n], vec![T::zero(); n])
        } else {
            (None, Vec::new(), Vec::new())
        };
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            m,
            v,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| EngineError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.params[self.id(name)?.0].value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let id = self.id(name)?;
        Ok(&mut self.params[id.0].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad())
            .map(|p| p.value.numel())
            .sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad() && p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.fill(T::zero());
            }
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) {
        if let Some(g) = &mut self.params[id.0].grad {
            for (a, &b) in g.iter_mut().zip(grad) {
                *a += b;
            }
        }
    }

    pub(crate) fn set_buffer(&mut self, id: ParamId, data: Vec<T>) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(p.value.numel(), data.len());
        p.value.data_mut().copy_from_slice(&data);
    }

    /// One bias-corrected Adam update over every trainable parameter,
    /// then zero the gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(cfg.beta1);
        let b2 = T::lit(cfg.beta2);
        let one = T::one();
        let c1 = one - T::lit(cfg.beta1.powi(t));
        let c2 = one - T::lit(cfg.beta2.powi(t));
        let lr = T::lit(cfg.lr);
        let eps = T::lit(cfg.eps);
        for p in &mut self.params {
            let Some(grad) = &mut p.grad else { continue };
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grad[i];
                p.m[i] = b1 * p.m[i] + (one - b1) * g;
                p.v[i] = b2 * p.v[i] + (one - b2) * g * g;
                let m_hat = p.m[i] / c1;
                let v_hat = p.v[i] / c2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                grad[i] = T::zero();
            }
        }
    }

    /// Copy of all values (params and buffers), for best-epoch restoration.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(EngineError::Config(format!(
                "snapshot has {} tensors, store has {}",
                snapshot.len(),
                self.params.len()
            )));
        }
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            if p.value.shape() != s.shape() {
                return Err(EngineError::Config(format!("snapshot shape mismatch for {}", p.name)));
            }
            p.value = s.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and value bytes.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            for &d in p.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &x in p.value.data() {
                x.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    /// Same names and values in another precision; optimizer state is reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(&p.name, p.value.cast(), p.requires_grad())
                .expect("names unique in source");
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(T::BYTES as u8);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.requires_grad() as u8);
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(EngineError::Checkpoint("bad magic".into()));
        }
        let width = r.take(1)?[0] as usize;
        if width != T::BYTES {
            return Err(EngineError::Checkpoint(format!(
                "checkpoint stores {width}-byte floats, expected {}",
                T::BYTES
            )));
        }
        let count = r.u32()? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| EngineError::Checkpoint("name is not UTF-8".into()))?
                .to_string();
            let trainable = r.take(1)?[0] != 0;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * T::BYTES)?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            store.insert(&name, Tensor::new(shape, data)?, trainable)?;
        }
        if r.pos != bytes.len() {
            return Err(EngineError::Checkpoint("trailing bytes".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| EngineError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add_param("w", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = scalar_store(0.5);
        s.adam_step(&AdamConfig::default());
        assert_eq!(s.value("w").unwrap().data(), &[0.5]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // m1 = 0.1, v1 = 0.001; bias-corrected both are 1, so the step is lr / (1 + eps).
        let mut s = scalar_store(0.0);
        let id = s.id("w").unwrap();
        s.accumulate_grad(id, &[1.0]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        s.adam_step(&cfg);
        let w = s.value("w").unwrap().data()[0];
        assert!((w + 0.1 / (1.0 + 1e-8)).abs() < 1e-12, "{w}");
        assert_eq!(s.get(id).grad.as_ref().unwrap(), &vec![0.0]);
    }

    #[test]
    fn identical_streams_give_identical_trajectories() {
        let mut a = scalar_store(1.0);
        let mut b = scalar_store(1.0);
        let id = a.id("w").unwrap();
        for i in 0..20 {
            let g = [(i as f64 * 0.37).sin()];
            a.accumulate_grad(id, &g);
            b.accumulate_grad(id, &g);
            a.adam_step(&AdamConfig::default());
            b.adam_step(&AdamConfig::default());
        }
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = scalar_store(0.0);
        assert!(matches!(
            s.add_param("w", Tensor::scalar(1.0)),
            Err(EngineError::DuplicateParam(_))
        ));
    }

    #[test]
    fn buffers_have_no_grad() {
        let mut s: ParamStore<f32> = ParamStore::new();
        s.add_buffer("bn.mean", Tensor::zeros([3])).unwrap();
        s.add_param("w", Tensor::zeros([2, 3])).unwrap();
        assert!(!s.get(s.id("bn.mean").unwrap()).requires_grad());
        assert_eq!(s.param_count(), 6);
    }

    #[test]
    fn checkpoint_round_trip_and_truncation() {
        let mut s: ParamStore<f32> = ParamStore::new();
        s.add_param("a.w", Tensor::from_f64([2, 2], &[1.0, -2.5, 3.25, 1e-7]).unwrap())
            .unwrap();
        s.add_buffer("a.running_var", Tensor::full([2], 1.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        s.save(&path).unwrap();
        let back = ParamStore::<f32>::load(&path).unwrap();
        assert_eq!(back.checksum(), s.checksum());
        assert!(!back.get(back.id("a.running_var").unwrap()).requires_grad());

        let bytes = s.to_bytes();
        assert!(ParamStore::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(ParamStore::<f64>::from_bytes(&bytes).is_err());
    }
}
