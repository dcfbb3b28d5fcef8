//! Latent DDPM: noise schedules, forward noising, a conditional U-Net noise
//! predictor, classifier-free guidance and ancestral sampling.
//!
//! Sampler arithmetic runs on the host in `f64`; only the predictor runs in
//! the model dtype. That keeps the guidance combination exact for `w = 0`
//! and `w = 1` and makes trajectories independent of batch composition.

use std::collections::HashMap;
use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::mix_seed;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, Conv2d, GroupNorm, Linear, ParamStore};
use crate::vqgan::LatentCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Per-step β, α and cumulative ᾱ. Steps are 1-indexed; `alpha_bar(0) == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion: step count must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "diffusion: need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * PI / 2.0).cos().powi(2);
            (1..=steps).map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, 0.999)).collect()
        }
    };
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("diffusion: every beta must lie in (0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar })
    }

    /// The step count `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::InvalidInput(format!("timestep {t} outside [1, {}]", self.len())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Coefficients of the reverse transition `t -> t_prev` (`t_prev < t`).
    /// For `t_prev = t - 1` these are the schedule's own α_t, β_t, ᾱ_t; for
    /// strided sampling the effective β is `1 - ᾱ_t / ᾱ_prev`.
    pub fn transition(&self, t: usize, t_prev: usize) -> Result<StepCoefficients> {
        self.check(t)?;
        if t_prev >= t {
            return Err(Error::InvalidInput(format!("transition {t} -> {t_prev} must go backwards")));
        }
        if t_prev + 1 == t {
            return Ok(StepCoefficients { alpha: self.alpha(t), beta: self.beta(t), alpha_bar: self.alpha_bar(t) });
        }
        let alpha = self.alpha_bar(t) / self.alpha_bar(t_prev);
        Ok(StepCoefficients { alpha, beta: 1.0 - alpha, alpha_bar: self.alpha_bar(t) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_bar: f64,
}

/// Evenly spaced timesteps in ascending order, always including `1` and `T`.
pub fn respaced_timesteps(total: usize, steps: Option<usize>) -> Vec<usize> {
    let s = steps.unwrap_or(total).clamp(1, total.max(1));
    if s == 1 {
        return vec![total];
    }
    let mut out: Vec<usize> = (0..s)
        .map(|k| (1.0 + k as f64 * (total - 1) as f64 / (s - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Closed-form forward noising `√ᾱ_t·z0 + √(1−ᾱ_t)·ε`; `t = 0` is the identity.
pub fn q_sample(z0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t > schedule.len() {
        return Err(Error::InvalidInput(format!("timestep {t} outside [0, {}]", schedule.len())));
    }
    q_sample_with(z0, eps, schedule.alpha_bar(t))
}

pub fn q_sample_with(z0: &[f64], eps: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if z0.len() != eps.len() {
        return Err(Error::Shape(format!("z0 has {} values, noise has {}", z0.len(), eps.len())));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

/// One forward step `q(z_t | z_{t-1})` with explicit noise.
pub fn forward_step(z_prev: &[f64], t: usize, xi: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check(t)?;
    if z_prev.len() != xi.len() {
        return Err(Error::Shape("forward_step: noise shape mismatch".into()));
    }
    let (a, b) = (schedule.alpha(t).sqrt(), schedule.beta(t).sqrt());
    Ok(z_prev.iter().zip(xi).map(|(z, x)| a * z + b * x).collect())
}

/// Reverse mean `(z_t − β/√(1−ᾱ)·ε̂)/√α` plus `√β·ξ` when `noise` is given.
pub fn p_sample_with(z_t: &[f64], eps: &[f64], c: StepCoefficients, noise: Option<&mut ChaCha8Rng>) -> Result<Vec<f64>> {
    if z_t.len() != eps.len() {
        return Err(Error::Shape(format!("z_t has {} values, noise estimate has {}", z_t.len(), eps.len())));
    }
    let k = c.beta / (1.0 - c.alpha_bar).sqrt();
    let inv = 1.0 / c.alpha.sqrt();
    let mut out: Vec<f64> = z_t.iter().zip(eps).map(|(z, e)| inv * (z - k * e)).collect();
    if let Some(rng) = noise {
        let sigma = c.beta.sqrt();
        for v in &mut out {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}

/// One ancestral step `z_t -> z_{t-1}` with σ_t² = β_t; no noise at `t = 1`.
pub fn p_sample_step(
    z_t: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let c = schedule.transition(t, t - 1)?;
    p_sample_with(z_t, eps, c, (t > 1).then_some(rng))
}

/// ε_θ(z_t, t, e) over a batch: `z_t` is `(B, C, H, W)`, `cond` is `(B, d)`.
pub trait NoisePredictor {
    fn predict(&self, z_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor>;
}

fn flat_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Guided estimate `ε̂(e_null) + w·(ε̂(e_cond) − ε̂(e_null))` from exactly two
/// predictor calls.
pub fn cfg_noise(
    predictor: &dyn NoisePredictor,
    z_t: &Tensor,
    t: &[usize],
    cond: &Tensor,
    null: &Tensor,
    w: f64,
) -> Result<Vec<f64>> {
    if !(w >= 0.0) {
        return Err(Error::InvalidInput(format!("guidance scale must be >= 0, got {w}")));
    }
    let uncond = flat_f64(&predictor.predict(z_t, t, null)?)?;
    let condit = flat_f64(&predictor.predict(z_t, t, cond)?)?;
    Ok(uncond.iter().zip(&condit).map(|(u, c)| u + w * (c - u)).collect())
}

/// Host-side latent batch shared by the samplers.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub data: Vec<f64>,
    pub shape: (usize, usize, usize),
    pub batch: usize,
}

impl LatentBatch {
    pub fn item_len(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.item_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Per-item standard normal draws, each from its own generator.
    pub fn noise(shape: (usize, usize, usize), rngs: &mut [ChaCha8Rng]) -> Self {
        let n = shape.0 * shape.1 * shape.2;
        let data = rngs
            .iter_mut()
            .flat_map(|rng| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>())
            .collect();
        Self { data, shape, batch: rngs.len() }
    }

    pub fn from_latents(zs: &[LatentCode], scale: f64) -> Result<Self> {
        let shape = zs.first().ok_or_else(|| Error::InvalidInput("empty latent batch".into()))?.shape();
        if zs.iter().any(|z| z.shape() != shape) {
            return Err(Error::Shape("latents in a batch must share a shape".into()));
        }
        let data = zs.iter().flat_map(|z| z.data.iter().map(|v| *v as f64 * scale)).collect();
        Ok(Self { data, shape, batch: zs.len() })
    }

    pub fn to_latents(&self, scale: f64) -> Result<Vec<LatentCode>> {
        let (c, h, w) = self.shape;
        (0..self.batch)
            .map(|b| LatentCode::new(self.item(b).iter().map(|v| (*v / scale) as f32).collect(), c, h, w, false))
            .collect()
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let (c, h, w) = self.shape;
        Ok(Tensor::from_vec(self.data.clone(), (self.batch, c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Stacks embeddings into a `(B, d)` tensor.
pub fn embedding_rows(es: &[&Embedding], dtype: DType) -> Result<Tensor> {
    let d = es.first().map(|e| e.vector.len()).unwrap_or(0);
    if es.iter().any(|e| e.vector.len() != d) {
        return Err(Error::Shape("embeddings in a batch must share a dimension".into()));
    }
    let flat: Vec<f32> = es.iter().flat_map(|e| e.vector.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (es.len(), d), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Conditioning inputs for a guided reverse pass.
pub struct Guidance<'a> {
    pub predictor: &'a dyn NoisePredictor,
    pub schedule: &'a NoiseSchedule,
    pub cond: Tensor,
    pub null: Tensor,
    pub w: f64,
    pub dtype: DType,
}

impl Guidance<'_> {
    /// Guided noise estimate for every item at timestep `t`.
    pub fn eps(&self, z: &LatentBatch, t: usize) -> Result<Vec<f64>> {
        let ts = vec![t; z.batch];
        cfg_noise(self.predictor, &z.to_tensor(self.dtype)?, &ts, &self.cond, &self.null, self.w)
    }

    /// Reverse transition `t -> t_prev` with per-item noise (none when `t_prev == 0`).
    pub fn step(&self, z: &LatentBatch, t: usize, t_prev: usize, rngs: &mut [ChaCha8Rng]) -> Result<LatentBatch> {
        let eps = self.eps(z, t)?;
        let c = self.schedule.transition(t, t_prev)?;
        let n = z.item_len();
        let mut out = z.clone();
        for (b, rng) in rngs.iter_mut().enumerate() {
            let next = p_sample_with(z.item(b), &eps[b * n..(b + 1) * n], c, (t_prev > 0).then_some(rng))?;
            out.item_mut(b).copy_from_slice(&next);
        }
        Ok(out)
    }

    /// Runs the reverse chain over `timesteps` (descending) down to step 0.
    pub fn denoise(&self, mut z: LatentBatch, timesteps: &[usize], rngs: &mut [ChaCha8Rng]) -> Result<LatentBatch> {
        if rngs.len() != z.batch {
            return Err(Error::InvalidInput("one generator per batch item is required".into()));
        }
        for (k, &t) in timesteps.iter().enumerate() {
            let t_prev = timesteps.get(k + 1).copied().unwrap_or(0);
            z = self.step(&z, t, t_prev, rngs)?;
        }
        Ok(z)
    }

    /// Draws `z_T ~ N(0, I)` per item and denoises it.
    pub fn sample(&self, shape: (usize, usize, usize), steps: Option<usize>, rngs: &mut [ChaCha8Rng]) -> Result<LatentBatch> {
        let z = LatentBatch::noise(shape, rngs);
        let mut ts = respaced_timesteps(self.schedule.len(), steps);
        ts.reverse();
        self.denoise(z, &ts, rngs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub w: f64,
    pub p_uncond: f64,
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0) || !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!("guidance needs w >= 0 and p_uncond in [0, 1], got {self:?}")));
        }
        Ok(())
    }
}

/// Draws `t ~ U[1, T]`, `ε ~ N(0, I)` and the unconditional dropout per item,
/// and returns the mean squared noise-prediction error.
pub fn training_loss(
    predictor: &dyn NoisePredictor,
    z0: &Tensor,
    cond: &Tensor,
    null: &Tensor,
    guidance: GuidanceConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    guidance.validate()?;
    let (b, _, _, _) = z0.dims4()?;
    if cond.dim(0)? != b {
        return Err(Error::Shape(format!("{} conditions for {b} latents", cond.dim(0)?)));
    }
    let ts: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=schedule.len())).collect();
    let drop: Vec<bool> = (0..b).map(|_| rng.gen::<f64>() < guidance.p_uncond).collect();
    let eps = nn::randn(rng, z0.dims(), z0.dtype())?;

    let dtype = z0.dtype();
    let coef = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
        let v: Vec<f64> = ts.iter().map(|t| f(schedule.alpha_bar(*t))).collect();
        Ok(Tensor::from_vec(v, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?)
    };
    let z_t = (z0.broadcast_mul(&coef(&|a| a.sqrt())?)? + eps.broadcast_mul(&coef(&|a| (1.0 - a).sqrt())?)?)?;
    let rows = drop
        .iter()
        .enumerate()
        .map(|(i, d)| if *d { null.narrow(0, 0, 1) } else { cond.narrow(0, i, 1) })
        .collect::<candle_core::Result<Vec<_>>>()?;
    let cond_used = Tensor::cat(&rows, 0)?;
    let pred = predictor.predict(&z_t, &ts, &cond_used)?;
    Ok((eps - pred)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    /// Training step count `T`.
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule: ScheduleKind,
    /// Respaced sampling steps; `None` samples all `T`.
    pub sample_steps: Option<usize>,
    pub guidance_scale: f64,
    pub p_uncond: f64,
    pub base_channels: usize,
    /// Snap sampled latents to the codebook before decoding.
    pub quantize_samples: bool,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            schedule: ScheduleKind::Linear,
            sample_steps: Some(50),
            guidance_scale: 3.0,
            p_uncond: 0.1,
            base_channels: 64,
            quantize_samples: false,
            seed: 0,
            optimizer: AdamConfig { lr: 2e-4, ..AdamConfig::default() },
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.make_schedule()?;
        self.guidance().validate()?;
        if self.base_channels == 0 {
            return Err(Error::Config("diffusion.base_channels must be positive".into()));
        }
        if self.sample_steps == Some(0) {
            return Err(Error::Config("diffusion.sample_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn make_schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end, self.schedule)
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig { w: self.guidance_scale, p_uncond: self.p_uncond }
    }
}

fn groups_for(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

/// Residual block whose second normalization is modulated (FiLM) by the
/// combined time/condition embedding.
#[derive(Debug, Clone)]
struct FilmBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    film: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl FilmBlock {
    fn new(ps: &ParamStore, c_in: usize, c_out: usize, emb: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&ps.pp("norm1"), c_in, groups_for(c_in))?,
            conv1: Conv2d::new(&ps.pp("conv1"), c_in, c_out, 3, 1, 1)?,
            film: Linear::new(&ps.pp("film"), emb, 2 * c_out)?,
            norm2: GroupNorm::new(&ps.pp("norm2"), c_out, groups_for(c_out))?,
            conv2: Conv2d::new(&ps.pp("conv2"), c_out, c_out, 3, 1, 1)?,
            skip: (c_in != c_out).then(|| Conv2d::new(&ps.pp("skip"), c_in, c_out, 1, 1, 0)).transpose()?,
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let (b, c, _, _) = h.dims4()?;
        let film = self.film.forward(emb)?.reshape((b, 2 * c, 1, 1))?;
        let scale = (film.narrow(1, 0, c)? + 1.0)?;
        let shift = film.narrow(1, c, c)?;
        let h = self.norm2.forward(&h)?.broadcast_mul(&scale)?.broadcast_add(&shift)?;
        let h = self.conv2.forward(&h.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Two-level U-Net at latent resolution, conditioned through FiLM on the sum
/// of a sinusoidal time embedding and a projection of the text embedding.
#[derive(Debug, Clone)]
pub struct UNet {
    time1: Linear,
    time2: Linear,
    cond_proj: Linear,
    conv_in: Conv2d,
    block1: FilmBlock,
    down: Conv2d,
    block2: FilmBlock,
    mid: FilmBlock,
    up: Conv2d,
    block3: FilmBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    base: usize,
    cond_dim: usize,
}

impl UNet {
    pub fn new(ps: &ParamStore, latent_channels: usize, cond_dim: usize, base: usize) -> Result<Self> {
        let emb = 4 * base;
        Ok(Self {
            time1: Linear::new(&ps.pp("time1"), base, emb)?,
            time2: Linear::new(&ps.pp("time2"), emb, emb)?,
            cond_proj: Linear::new(&ps.pp("cond_proj"), cond_dim, emb)?,
            conv_in: Conv2d::new(&ps.pp("conv_in"), latent_channels, base, 3, 1, 1)?,
            block1: FilmBlock::new(&ps.pp("block1"), base, base, emb)?,
            down: Conv2d::new(&ps.pp("down"), base, base, 3, 2, 1)?,
            block2: FilmBlock::new(&ps.pp("block2"), base, 2 * base, emb)?,
            mid: FilmBlock::new(&ps.pp("mid"), 2 * base, 2 * base, emb)?,
            up: Conv2d::new(&ps.pp("up"), 2 * base, base, 3, 1, 1)?,
            block3: FilmBlock::new(&ps.pp("block3"), 2 * base, base, emb)?,
            norm_out: GroupNorm::new(&ps.pp("norm_out"), base, groups_for(base))?,
            conv_out: Conv2d::zeros(&ps.pp("conv_out"), base, latent_channels, 3, 1)?,
            base,
            cond_dim,
        })
    }

    fn time_embedding(&self, t: &[usize], dtype: DType) -> Result<Tensor> {
        let half = self.base / 2;
        let mut v = Vec::with_capacity(t.len() * self.base);
        for &step in t {
            for i in 0..self.base {
                let freq = (-(10000f64.ln()) * (i % half.max(1)) as f64 / half.max(1) as f64).exp();
                let arg = step as f64 * freq;
                v.push(if i < half { arg.sin() } else { arg.cos() });
            }
        }
        Ok(Tensor::from_vec(v, (t.len(), self.base), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn forward(&self, z: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = z.dims4()?;
        if t.len() != b || cond.dims2()? != (b, self.cond_dim) {
            return Err(Error::Shape(format!(
                "predictor: {b} latents, {} timesteps, condition {:?} (expected d = {})",
                t.len(),
                cond.dims(),
                self.cond_dim
            )));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("predictor needs even latent height and width, got {h}x{w}")));
        }
        let temb = self.time2.forward(&self.time1.forward(&self.time_embedding(t, z.dtype())?)?.silu()?)?;
        let emb = (temb + self.cond_proj.forward(cond)?)?.silu()?;
        let h0 = self.conv_in.forward(z)?;
        let h1 = self.block1.forward(&h0, &emb)?;
        let h2 = self.block2.forward(&self.down.forward(&h1)?, &emb)?;
        let h2 = self.mid.forward(&h2, &emb)?;
        let up = self.up.forward(&h2.upsample_nearest2d(h, w)?)?;
        let h3 = self.block3.forward(&Tensor::cat(&[up, h1], 1)?, &emb)?;
        self.conv_out.forward(&self.norm_out.forward(&h3)?.silu()?)
    }
}

/// Trained predictor with its schedule and the latent scale factor that maps
/// VQ-GAN latents to roughly unit variance.
pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub params: ParamStore,
    pub schedule: NoiseSchedule,
    pub latent_scale: f64,
    unet: UNet,
    latent_shape: (usize, usize, usize),
    cond_dim: usize,
}

impl NoisePredictor for DiffusionModel {
    fn predict(&self, z_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        self.unet.forward(z_t, t, cond)
    }
}

impl DiffusionModel {
    pub fn new(config: DiffusionConfig, latent_shape: (usize, usize, usize), cond_dim: usize, dtype: DType) -> Result<Self> {
        config.validate()?;
        let (c, h, w) = latent_shape;
        if c == 0 || h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("diffusion needs a non-empty latent with even height and width, got {latent_shape:?}")));
        }
        let params = ParamStore::new(config.seed, dtype);
        let unet = UNet::new(&params.pp("unet"), c, cond_dim, config.base_channels)?;
        let schedule = config.make_schedule()?;
        Ok(Self { config, params, schedule, latent_scale: 1.0, unet, latent_shape, cond_dim })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.latent_shape
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn guidance<'a>(&'a self, conds: &[&Embedding], null: &Embedding, w: f64) -> Result<Guidance<'a>> {
        let cond = embedding_rows(conds, self.dtype())?;
        let null = embedding_rows(&vec![null; conds.len()], self.dtype())?;
        if cond.dim(1)? != self.cond_dim {
            return Err(Error::Shape(format!("condition dimension {} vs model {}", cond.dim(1)?, self.cond_dim)));
        }
        Ok(Guidance { predictor: self, schedule: &self.schedule, cond, null, w, dtype: self.dtype() })
    }

    /// One latent per condition, each driven by its own seed. Returned latents
    /// are in VQ-GAN units.
    pub fn sample(&self, conds: &[&Embedding], null: &Embedding, w: f64, seeds: &[u64], steps: Option<usize>) -> Result<Vec<LatentCode>> {
        if conds.len() != seeds.len() {
            return Err(Error::InvalidInput("one seed per condition is required".into()));
        }
        if conds.is_empty() {
            return Ok(Vec::new());
        }
        let guidance = self.guidance(conds, null, w)?;
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|s| ChaCha8Rng::seed_from_u64(*s)).collect();
        guidance.sample(self.latent_shape, steps.or(self.config.sample_steps), &mut rngs)?.to_latents(self.latent_scale)
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        let mut out = self.params.tensors();
        if let Ok(t) = Tensor::new(&[self.latent_scale], &Device::Cpu) {
            out.insert("latent_scale".into(), t);
        }
        out
    }

    pub fn load_tensors(&mut self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let scale = tensors
            .get("latent_scale")
            .ok_or_else(|| Error::Checkpoint("diffusion checkpoint lacks latent_scale".into()))?;
        self.latent_scale = nn::scalar(&scale.squeeze(0)?)?;
        let params: HashMap<String, Tensor> =
            tensors.iter().filter(|(k, _)| k.as_str() != "latent_scale").map(|(k, v)| (k.clone(), v.clone())).collect();
        self.params.load(&params)
    }
}

/// Reciprocal standard deviation of all latent values (1 for constant data).
pub fn latent_scale_for(latents: &[LatentCode]) -> f64 {
    let values: Vec<f64> = latents.iter().flat_map(|z| z.data.iter().map(|v| *v as f64)).collect();
    if values.len() < 2 {
        return 1.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    if var > 1e-12 {
        1.0 / var.sqrt()
    } else {
        1.0
    }
}

pub struct DiffusionTrainer {
    pub model: DiffusionModel,
    opt: Adam,
    pub step: usize,
}

impl DiffusionTrainer {
    pub fn new(model: DiffusionModel) -> Result<Self> {
        let opt = Adam::new(model.params.vars(), model.config.optimizer)?;
        Ok(Self { model, opt, step: 0 })
    }

    /// One update on unscaled latents `(B, C, H, W)` and their text embeddings `(B, d)`.
    pub fn train_step(&mut self, latents: &Tensor, cond: &Tensor, null: &Tensor) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(self.model.config.seed, 0xD1F), self.step as u64));
        let z0 = (latents.to_dtype(self.model.dtype())? * self.model.latent_scale)?;
        let cond = cond.to_dtype(self.model.dtype())?;
        let null = null.to_dtype(self.model.dtype())?;
        let guidance = self.model.config.guidance();
        let loss = training_loss(&self.model, &z0, &cond, &null, guidance, &self.model.schedule, &mut rng)?;
        let value = nn::scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("diffusion step {}: loss {value}", self.step)));
        }
        self.opt.step(&loss.backward()?)?;
        self.step += 1;
        Ok(value)
    }

    pub fn optimizer_state(&self) -> HashMap<String, Tensor> {
        self.opt.state_tensors("opt")
    }

    pub fn load_optimizer_state(&mut self, tensors: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        self.opt.load_state("opt", tensors, step)?;
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Modality;
    use std::cell::Cell;

    #[test]
    fn single_step_linear_schedule() {
        let s = make_schedule(1, 0.02, 0.02, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bars(), &[0.98]);
    }

    #[test]
    fn default_linear_schedule_against_direct_product() {
        let s = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let mut prod = 1.0;
        for t in 1..=1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
            prod *= 1.0 - beta;
            assert!((s.alpha_bar(t) - prod).abs() < 1e-12);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(1000) < 1e-4);
        assert!(s.alpha_bar(1) >= 0.99);
    }

    #[test]
    fn cosine_schedule_starts_near_one() {
        let s = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Cosine).unwrap();
        let f = |t: f64| ((t / 1000.0 + 0.008) / 1.008 * PI / 2.0).cos().powi(2);
        assert!((s.alpha_bar(1) - f(1.0) / f(0.0)).abs() < 1e-12);
        assert!(s.alpha_bar(1) >= 0.999);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn schedule_parameter_errors() {
        assert!(make_schedule(0, 1e-4, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.0, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.03, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 1e-4, 1.0, ScheduleKind::Cosine).is_err());
    }

    #[test]
    fn q_sample_examples() {
        assert_eq!(q_sample_with(&[0.3, -1.0], &[5.0, 5.0], 1.0).unwrap(), vec![0.3, -1.0]);
        assert_eq!(q_sample_with(&[0.3, -1.0], &[5.0, -2.0], 0.0).unwrap(), vec![5.0, -2.0]);
        let z = q_sample_with(&[2.0], &[1.0], 0.25).unwrap()[0];
        assert!((z - (1.0 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((z - 1.8660).abs() < 1e-4);
        assert!(q_sample_with(&[1.0], &[1.0, 2.0], 0.5).is_err());
        let s = make_schedule(4, 0.1, 0.2, ScheduleKind::Linear).unwrap();
        assert!(q_sample(&[1.0], 5, &[0.0], &s).is_err());
        assert_eq!(q_sample(&[1.5], 0, &[9.0], &s).unwrap(), vec![1.5]);
    }

    #[test]
    fn scalar_reverse_step_example() {
        let c = StepCoefficients { alpha: 0.99, beta: 0.01, alpha_bar: 0.5 };
        let z = p_sample_with(&[1.0], &[0.5], c, None).unwrap()[0];
        let expected = (1.0 - 0.01 * 0.5 / 0.5f64.sqrt()) / 0.99f64.sqrt();
        assert!((z - expected).abs() < 1e-12);
        // The closed form gives 0.997931; the commonly quoted 0.99792 is a rounding slip.
        assert!((z - 0.99792).abs() < 1e-4);
    }

    #[test]
    fn last_step_adds_no_noise_and_noise_is_reproducible() {
        let s = make_schedule(10, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mean = p_sample_with(&[0.7, -0.2], &[0.1, 0.3], s.transition(1, 0).unwrap(), None).unwrap();
        assert_eq!(p_sample_step(&[0.7, -0.2], 1, &[0.1, 0.3], &s, &mut rng).unwrap(), mean);
        let a = p_sample_step(&[0.7, -0.2], 5, &[0.1, 0.3], &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = p_sample_step(&[0.7, -0.2], 5, &[0.1, 0.3], &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(p_sample_step(&[0.0], 11, &[0.0], &s, &mut rng).is_err());
    }

    #[test]
    fn marginal_consistency_of_iterated_noising() {
        let s = make_schedule(50, 1e-3, 0.05, ScheduleKind::Linear).unwrap();
        let z0 = [1.5, -0.5];
        let t = 30;
        let trials = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..trials {
            let mut z = z0.to_vec();
            for step in 1..=t {
                let xi: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
                z = forward_step(&z, step, &xi, &s).unwrap();
            }
            for d in 0..2 {
                sum[d] += z[d];
                sq[d] += z[d] * z[d];
            }
        }
        let ab = s.alpha_bar(t);
        for d in 0..2 {
            let mean = sum[d] / trials as f64;
            let var = sq[d] / trials as f64 - mean * mean;
            let (m_exp, v_exp) = (ab.sqrt() * z0[d], 1.0 - ab);
            let se_mean = (v_exp / trials as f64).sqrt();
            let se_var = v_exp * (2.0 / (trials - 1) as f64).sqrt();
            assert!((mean - m_exp).abs() < 3.0 * se_mean, "dim {d}: mean {mean} vs {m_exp}");
            assert!((var - v_exp).abs() < 3.0 * se_var, "dim {d}: var {var} vs {v_exp}");
        }
    }

    /// Returns `value_of(cond)` everywhere and counts calls.
    struct Stub {
        calls: Cell<usize>,
    }

    impl NoisePredictor for Stub {
        fn predict(&self, z_t: &Tensor, _t: &[usize], cond: &Tensor) -> Result<Tensor> {
            self.calls.set(self.calls.get() + 1);
            let level = cond.narrow(1, 0, 1)?.reshape((cond.dim(0)?, 1, 1, 1))?.to_dtype(z_t.dtype())?;
            Ok(z_t.zeros_like()?.broadcast_add(&level)?)
        }
    }

    #[test]
    fn guidance_arithmetic() {
        let stub = Stub { calls: Cell::new(0) };
        let z = Tensor::zeros((1, 2, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let cond = Tensor::new(&[[1f32, 0.0]], &Device::Cpu).unwrap();
        let null = Tensor::new(&[[0f32, 1.0]], &Device::Cpu).unwrap();
        let out = cfg_noise(&stub, &z, &[3], &cond, &null, 3.0).unwrap();
        assert_eq!(stub.calls.get(), 2);
        assert!(out.iter().all(|v| *v == 3.0));
        assert!(cfg_noise(&stub, &z, &[3], &cond, &null, -0.1).is_err());
    }

    /// A predictor with a nonlinear, condition-dependent response.
    struct Wiggle;

    impl NoisePredictor for Wiggle {
        fn predict(&self, z_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
            let c = cond.sum_keepdim(1)?.reshape((cond.dim(0)?, 1, 1, 1))?;
            Ok((z_t.sin()?.broadcast_mul(&c)? + t[0] as f64 * 0.01)?)
        }
    }

    #[test]
    fn guidance_endpoints_and_affinity_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = nn::randn(&mut rng, &[1, 2, 4, 4], DType::F32).unwrap();
        let cond = nn::randn(&mut rng, &[1, 3], DType::F32).unwrap();
        let null = nn::randn(&mut rng, &[1, 3], DType::F32).unwrap();
        let p = &Wiggle;
        let direct = |c: &Tensor| flat_f64(&p.predict(&z, &[7], c).unwrap()).unwrap();
        assert_eq!(cfg_noise(p, &z, &[7], &cond, &null, 1.0).unwrap(), direct(&cond));
        assert_eq!(cfg_noise(p, &z, &[7], &cond, &null, 0.0).unwrap(), direct(&null));
        for (w1, w3) in [(0.0, 2.0), (1.0, 5.0), (0.5, 3.5), (2.0, 6.0)] {
            let e1 = cfg_noise(p, &z, &[7], &cond, &null, w1).unwrap();
            let e2 = cfg_noise(p, &z, &[7], &cond, &null, (w1 + w3) / 2.0).unwrap();
            let e3 = cfg_noise(p, &z, &[7], &cond, &null, w3).unwrap();
            for i in 0..e1.len() {
                assert_eq!(e1[i] + e3[i], 2.0 * e2[i], "w1={w1} w3={w3} index {i}");
            }
        }
    }

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict(&self, z_t: &Tensor, _t: &[usize], _cond: &Tensor) -> Result<Tensor> {
            Ok(z_t.zeros_like()?)
        }
    }

    #[test]
    fn zero_predictor_loss_is_noise_energy() {
        let s = make_schedule(100, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let g = GuidanceConfig { w: 1.0, p_uncond: 0.1 };
        let null = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
        let cond = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
        let z0 = Tensor::ones((1, 1, 1, 1), DType::F64, &Device::Cpu).unwrap();
        let draws = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let losses: Vec<f64> = (0..draws)
            .map(|_| nn::scalar(&training_loss(&Zero, &z0, &cond, &null, g, &s, &mut rng).unwrap()).unwrap())
            .collect();
        assert!(losses.iter().all(|l| *l >= 0.0));
        let mean = losses.iter().sum::<f64>() / draws as f64;
        // ε² has mean 1 and variance 2 per dimension.
        let se = (2.0 / draws as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}");
    }

    fn toy_model(dtype: DType) -> DiffusionModel {
        let cfg = DiffusionConfig { timesteps: 20, base_channels: 8, sample_steps: None, ..Default::default() };
        DiffusionModel::new(cfg, (2, 4, 4), 3, dtype).unwrap()
    }

    #[test]
    fn full_dropout_matches_explicit_null_condition() {
        let model = toy_model(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = nn::randn(&mut rng, &[3, 2, 4, 4], DType::F32).unwrap();
        let cond = nn::randn(&mut rng, &[3, 3], DType::F32).unwrap();
        let null = nn::randn(&mut rng, &[1, 3], DType::F32).unwrap();
        let nulls = null.repeat((3, 1)).unwrap();
        let all = GuidanceConfig { w: 1.0, p_uncond: 1.0 };
        let none = GuidanceConfig { w: 1.0, p_uncond: 0.0 };
        let a = training_loss(&model, &z0, &cond, &null, all, &model.schedule, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = training_loss(&model, &z0, &nulls, &null, none, &model.schedule, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(nn::scalar(&a).unwrap(), nn::scalar(&b).unwrap());
    }

    #[test]
    fn predictor_shapes_and_determinism() {
        for shape in [(2, 4, 4), (4, 8, 16), (3, 2, 6)] {
            let cfg = DiffusionConfig { timesteps: 10, base_channels: 8, ..Default::default() };
            let model = DiffusionModel::new(cfg, shape, 5, DType::F32).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let z = nn::randn(&mut rng, &[2, shape.0, shape.1, shape.2], DType::F32).unwrap();
            let c = nn::randn(&mut rng, &[2, 5], DType::F32).unwrap();
            let a = model.predict(&z, &[1, 9], &c).unwrap();
            assert_eq!(a.dims(), z.dims());
            let b = model.predict(&z, &[1, 9], &c).unwrap();
            assert_eq!(flat_f64(&a).unwrap(), flat_f64(&b).unwrap());
            assert!(model.predict(&z, &[1], &c).is_err());
        }
        assert!(DiffusionModel::new(DiffusionConfig::default(), (4, 5, 8), 5, DType::F32).is_err());
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut trainer = DiffusionTrainer::new(toy_model(DType::F64)).unwrap();
        trainer.opt.config.lr = 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z0 = nn::randn(&mut rng, &[2, 2, 4, 4], DType::F64).unwrap();
        let cond = nn::randn(&mut rng, &[2, 3], DType::F64).unwrap();
        let null = Tensor::zeros((1, 3), DType::F64, &Device::Cpu).unwrap();
        // Move away from the zero-initialized output layer so gradients reach every layer.
        for _ in 0..3 {
            trainer.train_step(&z0, &cond, &null).unwrap();
        }
        let model = &trainer.model;
        let eps = nn::randn(&mut rng, &[2, 2, 4, 4], DType::F64).unwrap();
        let ts = [4usize, 15];
        let loss = || -> Tensor {
            let ab: Vec<f64> = ts.iter().map(|t| model.schedule.alpha_bar(*t)).collect();
            let a = Tensor::from_vec(ab.iter().map(|v| v.sqrt()).collect::<Vec<_>>(), (2, 1, 1, 1), &Device::Cpu).unwrap();
            let b = Tensor::from_vec(ab.iter().map(|v| (1.0 - v).sqrt()).collect::<Vec<_>>(), (2, 1, 1, 1), &Device::Cpu).unwrap();
            let z_t = (z0.broadcast_mul(&a).unwrap() + eps.broadcast_mul(&b).unwrap()).unwrap();
            (&eps - model.predict(&z_t, &ts, &cond).unwrap()).unwrap().sqr().unwrap().mean_all().unwrap()
        };
        let grads = loss().backward().unwrap();
        let vars = model.params.vars();
        for name in ["unet.block2.conv1.weight", "unet.cond_proj.weight", "unet.conv_out.weight"] {
            let var = &vars.iter().find(|(n, _)| n == name).unwrap().1;
            let g = flat_f64(grads.get(var.as_tensor()).unwrap()).unwrap();
            let base = flat_f64(var.as_tensor()).unwrap();
            let dims = var.dims().to_vec();
            for idx in [0, base.len() / 3, base.len() - 1] {
                let h = 1e-5;
                let at = |delta: f64| {
                    let mut v = base.clone();
                    v[idx] += delta;
                    var.set(&Tensor::from_vec(v, dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
                    nn::scalar(&loss()).unwrap()
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                at(0.0);
                let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-8);
                assert!(rel <= 1e-3, "{name}[{idx}]: analytic {} vs numeric {fd}", g[idx]);
            }
        }
    }

    fn unit(v: Vec<f32>) -> Embedding {
        Embedding { vector: v, modality: Modality::Text }
    }

    #[test]
    fn sampling_is_reproducible_and_single_step_is_deterministic() {
        let model = toy_model(DType::F32);
        let (c, n) = (unit(vec![1.0, 0.0, 0.0]), unit(vec![0.0, 0.0, 1.0]));
        let a = model.sample(&[&c, &c], &n, 2.0, &[7, 8], Some(5)).unwrap();
        let b = model.sample(&[&c], &n, 2.0, &[7], Some(5)).unwrap();
        assert_eq!(a[0], b[0]);
        assert_ne!(a[0], a[1]);

        // T = 1: the only step is t = 1 -> 0, so the draw of z_T is the sole source of randomness.
        let cfg = DiffusionConfig { timesteps: 1, beta_start: 0.02, beta_end: 0.02, base_channels: 8, ..Default::default() };
        let one = DiffusionModel::new(cfg, (2, 4, 4), 3, DType::F32).unwrap();
        let guidance = one.guidance(&[&c], &n, 1.0).unwrap();
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(3)];
        let z_t = LatentBatch::noise((2, 4, 4), &mut rngs);
        let eps = guidance.eps(&z_t, 1).unwrap();
        let mean = p_sample_with(&z_t.data, &eps, one.schedule.transition(1, 0).unwrap(), None).unwrap();
        let sampled = guidance.sample((2, 4, 4), None, &mut [ChaCha8Rng::seed_from_u64(3)]).unwrap();
        assert_eq!(sampled.data, mean);
    }

    #[test]
    fn respacing_covers_both_ends() {
        assert_eq!(respaced_timesteps(1000, Some(1)), vec![1000]);
        let ts = respaced_timesteps(1000, Some(50));
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (1, 1000));
        assert_eq!(respaced_timesteps(5, None), vec![1, 2, 3, 4, 5]);
        assert_eq!(respaced_timesteps(5, Some(99)), vec![1, 2, 3, 4, 5]);
        let s = make_schedule(10, 0.01, 0.2, ScheduleKind::Linear).unwrap();
        let c = s.transition(7, 3).unwrap();
        assert!((c.alpha - s.alpha_bar(7) / s.alpha_bar(3)).abs() < 1e-15);
        assert_eq!(s.transition(7, 6).unwrap().beta, s.beta(7));
    }

    #[test]
    fn checkpoint_tensors_round_trip_scale() {
        let mut model = toy_model(DType::F32);
        model.latent_scale = 2.5;
        let tensors = model.tensors();
        let mut other = toy_model(DType::F32);
        other.load_tensors(&tensors).unwrap();
        assert_eq!(other.latent_scale, 2.5);
    }

    #[test]
    fn overfit_reduces_loss() {
        let mut trainer = DiffusionTrainer::new(toy_model(DType::F32)).unwrap();
        trainer.opt.config.lr = 3e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z0 = nn::randn(&mut rng, &[4, 2, 4, 4], DType::F32).unwrap();
        let cond = nn::randn(&mut rng, &[4, 3], DType::F32).unwrap();
        let null = Tensor::zeros((1, 3), DType::F32, &Device::Cpu).unwrap();
        let losses: Vec<f64> = (0..300).map(|_| trainer.train_step(&z0, &cond, &null).unwrap()).collect();
        let head = losses[..50].iter().sum::<f64>() / 50.0;
        let tail = losses[250..].iter().sum::<f64>() / 50.0;
        assert!(tail < 0.7 * head, "{head} -> {tail}");
    }
}
