//! Seeded parameter storage, the handful of layers the models share, and Adam.
//!
//! Parameters are initialized from a ChaCha stream in creation order, so a
//! model built twice from the same seed is bit-identical.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Uniform(f64),
    Normal(f64),
    Const(f64),
}

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named, seeded trainable parameters shared across a model's layers.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    prefix: String,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner { vars: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) })),
            prefix: String::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self { prefix, ..self.clone() }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Returns the named parameter, creating it with `init` on first use.
    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let mut inner = self.inner.lock().expect("param store poisoned");
        if let Some(var) = inner.vars.get(&full) {
            if var.dims() != shape {
                return Err(Error::Shape(format!("parameter {full}: {:?} vs requested {shape:?}", var.dims())));
            }
            return Ok(var.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Uniform(bound) => (0..n).map(|_| inner.rng.gen_range(-bound..=bound)).collect(),
            Init::Normal(std) => (0..n).map(|_| inner.rng.sample::<f64, _>(StandardNormal) * std).collect(),
            Init::Const(v) => vec![v; n],
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(full, var);
        Ok(out)
    }

    /// All parameters, sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars().into_iter().map(|(k, v)| (k, v.as_tensor().clone())).collect()
    }

    /// Overwrites every parameter from `tensors`; all names must be present.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vars() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Linear {
    inner: candle_nn::Linear,
}

impl Linear {
    pub fn new(ps: &ParamStore, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = fan_in_bound(in_dim);
        let w = ps.get("weight", &[out_dim, in_dim], Init::Uniform(bound))?;
        let b = ps.get("bias", &[out_dim], Init::Uniform(bound))?;
        Ok(Self { inner: candle_nn::Linear::new(w, Some(b)) })
    }

    /// Zero-initialized weights and bias.
    pub fn zeros(ps: &ParamStore, in_dim: usize, out_dim: usize) -> Result<Self> {
        let w = ps.get("weight", &[out_dim, in_dim], Init::Const(0.0))?;
        let b = ps.get("bias", &[out_dim], Init::Const(0.0))?;
        Ok(Self { inner: candle_nn::Linear::new(w, Some(b)) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    inner: candle_nn::Conv2d,
}

impl Conv2d {
    pub fn new(ps: &ParamStore, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let bound = fan_in_bound(c_in * kernel * kernel);
        let w = ps.get("weight", &[c_out, c_in, kernel, kernel], Init::Uniform(bound))?;
        let b = ps.get("bias", &[c_out], Init::Uniform(bound))?;
        let cfg = candle_nn::Conv2dConfig { padding, stride, ..Default::default() };
        Ok(Self { inner: candle_nn::Conv2d::new(w, Some(b), cfg) })
    }

    /// Zero-initialized kernel and bias, so the layer starts as a constant zero map.
    pub fn zeros(ps: &ParamStore, c_in: usize, c_out: usize, kernel: usize, padding: usize) -> Result<Self> {
        let w = ps.get("weight", &[c_out, c_in, kernel, kernel], Init::Const(0.0))?;
        let b = ps.get("bias", &[c_out], Init::Const(0.0))?;
        let cfg = candle_nn::Conv2dConfig { padding, ..Default::default() };
        Ok(Self { inner: candle_nn::Conv2d::new(w, Some(b), cfg) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    inner: candle_nn::ConvTranspose2d,
}

impl ConvTranspose2d {
    pub fn new(ps: &ParamStore, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let bound = fan_in_bound(c_out * kernel * kernel);
        let w = ps.get("weight", &[c_in, c_out, kernel, kernel], Init::Uniform(bound))?;
        let b = ps.get("bias", &[c_out], Init::Uniform(bound))?;
        let cfg = candle_nn::ConvTranspose2dConfig { padding, stride, ..Default::default() };
        Ok(Self { inner: candle_nn::ConvTranspose2d::new(w, Some(b), cfg) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

/// Group normalization over `(B, C, H, W)` built from differentiable primitives.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(ps: &ParamStore, channels: usize, groups: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::Config(format!("{channels} channels not divisible into {groups} groups")));
        }
        Ok(Self {
            weight: ps.get("weight", &[channels], Init::Const(1.0))?,
            bias: ps.get("bias", &[channels], Init::Const(0.0))?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((b, c, h, w))?;
        let scale = self.weight.reshape((1, c, 1, 1))?;
        let shift = self.bias.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &ParamStore, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.get("weight", &[dim], Init::Const(1.0))?,
            bias: ps.get("bias", &[dim], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(ps: &ParamStore, count: usize, dim: usize) -> Result<Self> {
        Ok(Self { table: ps.get("weight", &[count, dim], Init::Normal(0.02))? })
    }

    /// `ids` of shape `(B, L)` to `(B, L, dim)`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let flat = self.table.index_select(&ids.flatten_all()?, 0)?;
        Ok(flat.reshape((b, l, self.table.dim(1)?))?)
    }
}

/// Logistic sigmoid from primitives (differentiable).
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Row-wise L2 normalization of a `(N, d)` tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-12)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: 1.0 }
    }
}

/// Adam whose moment buffers can be checkpointed, so training resumes exactly.
pub struct Adam {
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
    pub config: AdamConfig,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, config: AdamConfig) -> Result<Self> {
        let m = vars.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = vars.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { vars, m, v, step: 0, config })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Applies one update and returns the pre-clip global gradient norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        self.step += 1;
        let mut sq = 0.0;
        for (_, var) in &self.vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient norm at step {}", self.step)));
        }
        let clip = if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            self.config.grad_clip / norm
        } else {
            1.0
        };
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // Gradients carry the step's graph; keeping them in the moments
            // would chain every step's graph together.
            let g = (g.detach() * clip)?;
            let m = ((&self.m[i] * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            if lr != 0.0 {
                let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
                var.set(&(var.as_tensor() - (update * lr)?)?)?;
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(norm)
    }

    pub fn state_tensors(&self, prefix: &str) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.insert(format!("{prefix}.m.{name}"), self.m[i].clone());
            out.insert(format!("{prefix}.v.{name}"), self.v[i].clone());
        }
        out
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for (kind, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("{prefix}.{kind}.{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {key}")))?;
                *slot = t.to_dtype(var.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Standard-normal noise drawn from a seeded host RNG.
pub fn randn(rng: &mut impl Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let a = ParamStore::new(5, DType::F32);
        let b = ParamStore::new(5, DType::F32);
        Linear::new(&a.pp("l"), 4, 3).unwrap();
        Linear::new(&b.pp("l"), 4, 3).unwrap();
        let ta = a.tensors();
        let tb = b.tensors();
        for (k, v) in &ta {
            let diff = (v - &tb[k]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(diff, 0.0);
        }
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let ps = ParamStore::new(0, DType::F64);
        let gn = GroupNorm::new(&ps, 4, 2).unwrap();
        let x = Tensor::arange(0f64, 32.0, &Device::Cpu).unwrap().reshape((1, 4, 2, 4)).unwrap();
        let y = gn.forward(&x).unwrap().reshape((2, 16)).unwrap();
        let mean = y.mean_keepdim(1).unwrap().to_vec2::<f64>().unwrap();
        assert!(mean.iter().all(|m| m[0].abs() < 1e-9));
    }

    #[test]
    fn adam_with_zero_lr_leaves_parameters() {
        let ps = ParamStore::new(1, DType::F32);
        let lin = Linear::new(&ps, 3, 2).unwrap();
        let before = ps.tensors();
        let mut opt = Adam::new(ps.vars(), AdamConfig { lr: 0.0, ..Default::default() }).unwrap();
        let x = Tensor::ones((2, 3), DType::F32, &Device::Cpu).unwrap();
        let loss = lin.forward(&x).unwrap().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        for (k, v) in ps.tensors() {
            let d = (v - &before[&k]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let ps = ParamStore::new(2, DType::F32);
        let w = ps.get("w", &[4], Init::Const(3.0)).unwrap();
        let mut opt = Adam::new(ps.vars(), AdamConfig { lr: 0.1, grad_clip: 0.0, ..Default::default() }).unwrap();
        for _ in 0..200 {
            let loss = w.sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let end = scalar(&w.sqr().unwrap().sum_all().unwrap()).unwrap();
        assert!(end < 1e-2, "{end}");
    }
}
