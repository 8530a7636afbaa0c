use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor2;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters with Adam moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor2>,
    first_moment: Vec<Tensor2>,
    second_moment: Vec<Tensor2>,
    step: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2) -> ParamId {
        let (r, c) = value.shape();
        self.names.push(name.into());
        self.values.push(value);
        self.first_moment.push(Tensor2::zeros(r, c));
        self.second_moment.push(Tensor2::zeros(r, c));
        ParamId(self.values.len() - 1)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor2::zeros(rows, cols))
    }

    /// Gaussian init with variance `2 / rows` (He scaling for a `rows`-input layer).
    pub fn add_he(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut StreamRng) -> ParamId {
        self.add_normal(name, rows, cols, (2.0 / rows.max(1) as f64).sqrt(), rng)
    }

    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut StreamRng,
    ) -> ParamId {
        let t = Tensor2::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.values[id.0]
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.data().len()).sum()
    }

    /// Zero gradient for every parameter.
    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            grads: self.values.iter().map(|v| Tensor2::zeros(v.rows(), v.cols())).collect(),
        }
    }

    /// One Adam step on `g + wd·p` (L2 penalty folded into the gradient).
    /// A non-finite gradient rejects the whole step and leaves the store untouched.
    pub fn optimizer_step(&mut self, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
        if grads.grads.len() != self.values.len() {
            return Err(Error::shape(
                "optimizer_step",
                "gradient count differs from parameter count",
            ));
        }
        for (i, g) in grads.grads.iter().enumerate() {
            if g.shape() != self.values[i].shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("gradient shape for {}", self.names[i]),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", self.names[i])));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, g) in grads.grads.iter().enumerate() {
            let p = self.values[i].data_mut();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k] + weight_decay * p[k];
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    /// Checkpoint bytes: u32 count, then per tensor u16 name length, UTF-8
    /// name, u32 rows, u32 cols, rows·cols f64 (all little-endian).
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for (name, v) in self.names.iter().zip(&self.values) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(v.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(v.cols() as u32).to_le_bytes());
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |k: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + k)
                .ok_or_else(|| Error::format(origin, pos as u64, "unexpected end of checkpoint"))?;
            pos += k;
            Ok(s)
        };
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(len)?)
                .map_err(|_| Error::format(origin, 0, "tensor name is not UTF-8"))?
                .to_owned();
            let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let raw = take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.add(name, Tensor2::from_vec(rows, cols, data)?);
        }
        if pos != bytes.len() {
            return Err(Error::format(origin, pos as u64, "trailing bytes in checkpoint"));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, path)
    }

    /// Copies values from `other` (matching names and shapes), keeping optimizer state.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for i in 0..self.values.len() {
            let id = other
                .find(&self.names[i])
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {}", self.names[i])))?;
            if other.value(id).shape() != self.values[i].shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {} has wrong shape",
                    self.names[i]
                )));
            }
            self.values[i] = other.value(id).clone();
        }
        Ok(())
    }
}

/// Per-parameter gradients, index-aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) grads: Vec<Tensor2>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor2)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn scale(&mut self, k: f64) {
        self.grads.iter_mut().for_each(|g| g.scale(k));
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.iter().fold(0.0, |m, g| m.max(g.max_abs()))
    }
}
