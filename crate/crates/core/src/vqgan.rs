//! VQ-GAN over spectral images: convolutional encoder, nearest-neighbour
//! codebook quantizer with a straight-through estimator, convolutional decoder
//! and a patch discriminator trained with hinge losses.

use std::collections::HashMap;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, Conv2d, ConvTranspose2d, GroupNorm, Init, ParamStore};
use crate::spectral::{SpectralImage, StftConfig, COS_PHASE, LOG_MAG, SIN_PHASE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqGanConfig {
    /// Spatial compression factor; a power of two.
    pub r: usize,
    pub latent_channels: usize,
    pub codebook_size: usize,
    pub base_channels: usize,
    pub disc_channels: usize,
    pub commit_beta: f64,
    pub adv_weight: f64,
    /// Generator steps before the discriminator and adversarial term switch on.
    pub disc_start: usize,
    /// Replace codebook entries unused for this many steps; 0 disables.
    pub dead_code_steps: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub disc_optimizer: AdamConfig,
}

impl Default for VqGanConfig {
    fn default() -> Self {
        Self {
            r: 8,
            latent_channels: 4,
            codebook_size: 1024,
            base_channels: 32,
            disc_channels: 32,
            commit_beta: 0.25,
            adv_weight: 0.1,
            disc_start: 2000,
            dead_code_steps: 100,
            seed: 0,
            optimizer: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
            disc_optimizer: AdamConfig { lr: 1e-3, beta1: 0.5, ..AdamConfig::default() },
        }
    }
}

impl VqGanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r < 2 || !self.r.is_power_of_two() {
            return Err(Error::Config(format!("vqgan.r must be a power of two >= 2, got {}", self.r)));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("vqgan.codebook_size must be >= 2".into()));
        }
        if self.latent_channels == 0 || self.base_channels < 4 || self.base_channels % 4 != 0 {
            return Err(Error::Config("vqgan channel counts must be positive multiples of 4".into()));
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        self.r.trailing_zeros() as usize
    }
}

/// Latent grid `C × h × w`, either raw encoder output or snapped to codebook entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub data: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub quantized: bool,
}

impl LatentCode {
    pub fn new(data: Vec<f32>, channels: usize, height: usize, width: usize, quantized: bool) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "latent data has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { data, channels, height, width, quantized })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// `(1, C, h, w)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, self.channels, self.height, self.width), &Device::Cpu)?
            .to_dtype(dtype)?)
    }

    /// Splits a `(B, C, h, w)` tensor into latents.
    pub fn from_batch(t: &Tensor, quantized: bool) -> Result<Vec<Self>> {
        let (b, c, h, w) = t.dims4()?;
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let n = c * h * w;
        (0..b)
            .map(|i| Self::new(flat[i * n..(i + 1) * n].to_vec(), c, h, w, quantized))
            .collect()
    }

    pub fn stack(latents: &[LatentCode], dtype: DType) -> Result<Tensor> {
        let first = latents.first().ok_or_else(|| Error::InvalidInput("empty latent batch".into()))?;
        if let Some(bad) = latents.iter().find(|l| l.shape() != first.shape()) {
            return Err(Error::Shape(format!("latent batch mixes {:?} and {:?}", first.shape(), bad.shape())));
        }
        let data: Vec<f32> = latents.iter().flat_map(|l| l.data.iter().copied()).collect();
        let (c, h, w) = first.shape();
        Ok(Tensor::from_vec(data, (latents.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Copies latent columns `[start, start + len)`.
    pub fn columns(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.width {
            return Err(Error::Shape(format!("columns {start}..{} exceed width {}", start + len, self.width)));
        }
        let mut data = Vec::with_capacity(self.channels * self.height * len);
        for row in self.data.chunks(self.width) {
            data.extend_from_slice(&row[start..start + len]);
        }
        Self::new(data, self.channels, self.height, len, self.quantized)
    }
}

/// `K × C` table of code vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub entries: Vec<f32>,
    pub size: usize,
    pub dim: usize,
}

impl Codebook {
    pub fn new(entries: Vec<f32>, size: usize, dim: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidInput("codebook needs at least 2 entries".into()));
        }
        if entries.len() != size * dim {
            return Err(Error::Shape(format!("codebook has {} values, expected {size}x{dim}", entries.len())));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite codebook entry".into()));
        }
        Ok(Self { entries, size, dim })
    }

    pub fn entry(&self, k: usize) -> &[f32] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    /// Index of the nearest entry by Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size {
            let d: f64 = self.entry(k).iter().zip(v).map(|(e, x)| (*x as f64 - *e as f64).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
pub struct Quantized {
    pub latent: LatentCode,
    /// Row-major `h × w` code indices.
    pub indices: Vec<usize>,
    pub codebook_loss: f64,
    pub commit_loss: f64,
}

/// Snaps every spatial vector of `z_e` to its nearest codebook entry.
///
/// Both losses are the mean over spatial vectors of the squared distance to
/// the selected entry; they differ only in where gradients flow, which is
/// irrelevant outside training.
pub fn quantize(z_e: &LatentCode, book: &Codebook) -> Result<Quantized> {
    if z_e.channels != book.dim {
        return Err(Error::Shape(format!(
            "latent has {} channels, codebook entries have {}",
            z_e.channels, book.dim
        )));
    }
    let (c, h, w) = z_e.shape();
    let plane = h * w;
    let mut out = vec![0f32; c * plane];
    let mut indices = Vec::with_capacity(plane);
    let mut sq = 0f64;
    let mut v = vec![0f32; c];
    for p in 0..plane {
        for ch in 0..c {
            v[ch] = z_e.data[ch * plane + p];
        }
        let k = book.nearest(&v);
        for (ch, e) in book.entry(k).iter().enumerate() {
            out[ch * plane + p] = *e;
            sq += (v[ch] as f64 - *e as f64).powi(2);
        }
        indices.push(k);
    }
    let loss = sq / plane as f64;
    Ok(Quantized {
        latent: LatentCode::new(out, c, h, w, true)?,
        indices,
        codebook_loss: loss,
        commit_loss: loss,
    })
}

fn groups_for(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(ps: &ParamStore, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&ps.pp("norm1"), c_in, groups_for(c_in))?,
            conv1: Conv2d::new(&ps.pp("conv1"), c_in, c_out, 3, 1, 1)?,
            norm2: GroupNorm::new(&ps.pp("norm2"), c_out, groups_for(c_out))?,
            conv2: Conv2d::new(&ps.pp("conv2"), c_out, c_out, 3, 1, 1)?,
            skip: if c_in != c_out { Some(Conv2d::new(&ps.pp("skip"), c_in, c_out, 1, 1, 0)?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

fn level_channels(cfg: &VqGanConfig, level: usize) -> usize {
    cfg.base_channels * (1 << level.min(2))
}

#[derive(Debug, Clone)]
struct Encoder {
    conv_in: Conv2d,
    downs: Vec<(ResBlock, Conv2d)>,
    mid: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Encoder {
    fn new(ps: &ParamStore, cfg: &VqGanConfig) -> Result<Self> {
        let conv_in = Conv2d::new(&ps.pp("conv_in"), 3, cfg.base_channels, 3, 1, 1)?;
        let mut downs = Vec::new();
        for level in 0..cfg.levels() {
            let (c_in, c_out) = (level_channels(cfg, level), level_channels(cfg, level + 1));
            let p = ps.pp(format!("down{level}"));
            downs.push((ResBlock::new(&p.pp("res"), c_in, c_in)?, Conv2d::new(&p.pp("down"), c_in, c_out, 4, 2, 1)?));
        }
        let top = level_channels(cfg, cfg.levels());
        Ok(Self {
            conv_in,
            downs,
            mid: ResBlock::new(&ps.pp("mid"), top, top)?,
            norm_out: GroupNorm::new(&ps.pp("norm_out"), top, groups_for(top))?,
            conv_out: Conv2d::new(&ps.pp("conv_out"), top, cfg.latent_channels, 1, 1, 0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(x)?;
        for (res, down) in &self.downs {
            h = down.forward(&res.forward(&h)?)?;
        }
        let h = self.mid.forward(&h)?;
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    conv_in: Conv2d,
    mid: ResBlock,
    ups: Vec<(ConvTranspose2d, ResBlock)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Decoder {
    fn new(ps: &ParamStore, cfg: &VqGanConfig) -> Result<Self> {
        let top = level_channels(cfg, cfg.levels());
        let mut ups = Vec::new();
        for level in (0..cfg.levels()).rev() {
            let (c_in, c_out) = (level_channels(cfg, level + 1), level_channels(cfg, level));
            let p = ps.pp(format!("up{level}"));
            ups.push((ConvTranspose2d::new(&p.pp("up"), c_in, c_out, 4, 2, 1)?, ResBlock::new(&p.pp("res"), c_out, c_out)?));
        }
        Ok(Self {
            conv_in: Conv2d::new(&ps.pp("conv_in"), cfg.latent_channels, top, 3, 1, 1)?,
            mid: ResBlock::new(&ps.pp("mid"), top, top)?,
            ups,
            norm_out: GroupNorm::new(&ps.pp("norm_out"), cfg.base_channels, groups_for(cfg.base_channels))?,
            conv_out: Conv2d::new(&ps.pp("conv_out"), cfg.base_channels, 3, 3, 1, 1)?,
        })
    }

    /// Returns normalized channels: log-magnitude unbounded, phase in `[-1, 1]`.
    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.mid.forward(&self.conv_in.forward(z)?)?;
        for (up, res) in &self.ups {
            h = res.forward(&up.forward(&h)?)?;
        }
        let out = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        let mag = out.narrow(1, 0, 1)?;
        let phase = out.narrow(1, 1, 2)?.tanh()?;
        Ok(Tensor::cat(&[mag, phase], 1)?)
    }
}

fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * 0.2)?)?)
}

/// Patch discriminator: two stride-2 convolutions and a 3×3 scoring head,
/// giving a `1 × H/4 × W/4` realness map.
#[derive(Debug, Clone)]
struct Discriminator {
    conv1: Conv2d,
    conv2: Conv2d,
    norm2: GroupNorm,
    head: Conv2d,
}

impl Discriminator {
    fn new(ps: &ParamStore, cfg: &VqGanConfig) -> Result<Self> {
        let d = cfg.disc_channels;
        Ok(Self {
            conv1: Conv2d::new(&ps.pp("conv1"), 3, d, 4, 2, 1)?,
            conv2: Conv2d::new(&ps.pp("conv2"), d, 2 * d, 4, 2, 1)?,
            norm2: GroupNorm::new(&ps.pp("norm2"), 2 * d, groups_for(2 * d))?,
            head: Conv2d::new(&ps.pp("head"), 2 * d, 1, 3, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.conv1.forward(x)?)?;
        let h = leaky_relu(&self.norm2.forward(&self.conv2.forward(&h)?)?)?;
        self.head.forward(&h)
    }
}

/// Affine map of the log-magnitude channel into roughly `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagnitudeScaling {
    pub offset: f64,
    pub scale: f64,
}

impl MagnitudeScaling {
    /// Spans `[ln eps_floor, ln(window/2)]`; `window/2` bounds the magnitude of
    /// a Hann-windowed frame with samples in `[-1, 1]`.
    pub fn for_config(cfg: &StftConfig) -> Self {
        let lo = cfg.eps_floor.ln();
        let hi = (cfg.window_size as f64 / 2.0).ln();
        Self { offset: (lo + hi) / 2.0, scale: (hi - lo) / 2.0 }
    }
}

/// Training losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VqGanLossReport {
    pub recon: f64,
    pub codebook_loss: f64,
    pub commit_loss: f64,
    pub gen_adv: f64,
    pub disc_loss: f64,
}

impl VqGanLossReport {
    fn check(&self, step: usize) -> Result<()> {
        let fields = [
            ("recon", self.recon),
            ("codebook_loss", self.codebook_loss),
            ("commit_loss", self.commit_loss),
            ("gen_adv", self.gen_adv),
            ("disc_loss", self.disc_loss),
        ];
        if let Some((name, v)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numerical(format!("vqgan step {step}: {name} = {v} ({self:?})")));
        }
        Ok(())
    }
}

pub struct VqGan {
    pub config: VqGanConfig,
    pub stft: Arc<StftConfig>,
    pub gen_params: ParamStore,
    pub disc_params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    codebook: Tensor,
    discriminator: Discriminator,
    scaling: MagnitudeScaling,
}

impl VqGan {
    pub fn new(config: VqGanConfig, stft: Arc<StftConfig>, dtype: DType) -> Result<Self> {
        config.validate()?;
        let gen_params = ParamStore::new(config.seed, dtype);
        let disc_params = ParamStore::new(crate::data::mix_seed(config.seed, 0xD15C), dtype);
        let encoder = Encoder::new(&gen_params.pp("encoder"), &config)?;
        let decoder = Decoder::new(&gen_params.pp("decoder"), &config)?;
        let bound = 1.0 / config.codebook_size as f64;
        let codebook = gen_params.get("codebook", &[config.codebook_size, config.latent_channels], Init::Uniform(bound))?;
        let discriminator = Discriminator::new(&disc_params.pp("disc"), &config)?;
        let scaling = MagnitudeScaling::for_config(&stft);
        Ok(Self { config, stft, gen_params, disc_params, encoder, decoder, codebook, discriminator, scaling })
    }

    pub fn dtype(&self) -> DType {
        self.gen_params.dtype()
    }

    pub fn codebook(&self) -> Result<Codebook> {
        let entries = self.codebook.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Codebook::new(entries, self.config.codebook_size, self.config.latent_channels)
    }

    pub fn latent_shape(&self, height: usize, width: usize) -> (usize, usize, usize) {
        let r = self.config.r;
        (self.config.latent_channels, height / r, width / r)
    }

    fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let r = self.config.r;
        if h % r != 0 || w % r != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("spectral size {h}x{w} is not divisible by r={r}")));
        }
        Ok(())
    }

    /// Stacks spectral images into a normalized `(B, 3, H, W)` tensor.
    pub fn spectral_batch(&self, xs: &[SpectralImage]) -> Result<Tensor> {
        let first = xs.first().ok_or_else(|| Error::InvalidInput("empty spectral batch".into()))?;
        let (_, h, w) = first.shape();
        self.check_spatial(h, w)?;
        let MagnitudeScaling { offset, scale } = self.scaling;
        let mut data = Vec::with_capacity(xs.len() * 3 * h * w);
        for x in xs {
            if x.shape() != first.shape() {
                return Err(Error::Shape(format!("batch mixes {:?} and {:?}", first.shape(), x.shape())));
            }
            data.extend(x.channel(LOG_MAG).iter().map(|v| ((*v as f64 - offset) / scale) as f32));
            data.extend_from_slice(x.channel(SIN_PHASE));
            data.extend_from_slice(x.channel(COS_PHASE));
        }
        Ok(Tensor::from_vec(data, (xs.len(), 3, h, w), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    /// Converts a normalized `(B, 3, H, W)` decoder output back to spectral
    /// images, clamping the magnitude floor and projecting each phase pair onto
    /// the unit circle.
    pub fn to_spectral(&self, t: &Tensor) -> Result<Vec<SpectralImage>> {
        let (b, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let MagnitudeScaling { offset, scale } = self.scaling;
        let floor = self.stft.eps_floor.ln() as f32;
        let plane = h * w;
        (0..b)
            .map(|i| {
                let mut data = flat[i * 3 * plane..(i + 1) * 3 * plane].to_vec();
                for v in &mut data[..plane] {
                    *v = ((*v as f64 * scale + offset) as f32).max(floor);
                }
                project_phase(&mut data[plane..], plane);
                SpectralImage::new(data, h, w, self.stft.clone())
            })
            .collect()
    }

    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }

    /// Straight-through quantization of a `(B, C, h, w)` tensor. Returns the
    /// straight-through output, the selected entries, the codebook and commit
    /// losses, and the flat code indices.
    pub fn quantize_tensor(&self, z_e: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor, Vec<usize>)> {
        let (b, c, h, w) = z_e.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!("latent has {c} channels, codebook expects {}", self.config.latent_channels)));
        }
        let book = self.codebook()?;
        let flat = z_e.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?;
        let host = flat.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        let indices: Vec<usize> = host.iter().map(|v| book.nearest(v)).collect();
        let idx = Tensor::from_vec(indices.iter().map(|&i| i as u32).collect::<Vec<_>>(), b * h * w, &Device::Cpu)?;
        let e = self.codebook.index_select(&idx, 0)?;
        let n = (b * h * w) as f64;
        let codebook_loss = ((flat.detach() - &e)?.sqr()?.sum_all()? / n)?;
        let commit_loss = ((&flat - e.detach())?.sqr()?.sum_all()? / n)?;
        let z_q = e.reshape((b, h, w, c))?.permute((0, 3, 1, 2))?.contiguous()?;
        let st = (z_e + (&z_q - z_e)?.detach())?;
        Ok((st, z_q, codebook_loss, commit_loss, indices))
    }

    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!("latent has {c} channels, decoder expects {}", self.config.latent_channels)));
        }
        self.decoder.forward(z)
    }

    pub fn discriminate_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!("discriminator needs 3xHxW with H, W divisible by 4, got {c}x{h}x{w}")));
        }
        self.discriminator.forward(x)
    }

    /// Unquantized encoder output.
    pub fn encode(&self, x: &SpectralImage) -> Result<LatentCode> {
        Ok(self.encode_batch(std::slice::from_ref(x))?.remove(0))
    }

    pub fn encode_batch(&self, xs: &[SpectralImage]) -> Result<Vec<LatentCode>> {
        let t = self.spectral_batch(xs)?;
        LatentCode::from_batch(&self.encode_tensor(&t)?, false)
    }

    /// Encoder output snapped to the codebook.
    pub fn encode_quantized(&self, xs: &[SpectralImage]) -> Result<Vec<LatentCode>> {
        let book = self.codebook()?;
        self.encode_batch(xs)?
            .iter()
            .map(|z| Ok(quantize(z, &book)?.latent))
            .collect()
    }

    pub fn decode(&self, z: &LatentCode) -> Result<SpectralImage> {
        Ok(self.decode_batch(std::slice::from_ref(z))?.remove(0))
    }

    pub fn decode_batch(&self, zs: &[LatentCode]) -> Result<Vec<SpectralImage>> {
        let t = LatentCode::stack(zs, self.dtype())?;
        self.to_spectral(&self.decode_tensor(&t)?)
    }

    /// Patch realness scores, `1 × H/4 × W/4`, flattened row-major.
    pub fn discriminate(&self, x: &SpectralImage) -> Result<Vec<f32>> {
        let t = self.spectral_batch(std::slice::from_ref(x))?;
        Ok(self.discriminate_tensor(&t)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }

    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let gen: HashMap<String, Tensor> = prefixed(tensors, "gen.");
        let disc: HashMap<String, Tensor> = prefixed(tensors, "disc.");
        self.gen_params.load(&gen)?;
        self.disc_params.load(&disc)
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (k, v) in self.gen_params.tensors() {
            out.insert(format!("gen.{k}"), v);
        }
        for (k, v) in self.disc_params.tensors() {
            out.insert(format!("disc.{k}"), v);
        }
        out
    }
}

/// Renormalizes interleaved sin/cos planes to unit modulus; a pair with no
/// direction falls back to angle zero.
pub fn project_phase(phase: &mut [f32], plane: usize) {
    let (sin, cos) = phase.split_at_mut(plane);
    for (s, c) in sin.iter_mut().zip(cos.iter_mut()) {
        let m = ((*s as f64).powi(2) + (*c as f64).powi(2)).sqrt();
        if m > 1e-6 {
            *s = (*s as f64 / m) as f32;
            *c = (*c as f64 / m) as f32;
        } else {
            *s = 0.0;
            *c = 1.0;
        }
    }
}

pub(crate) fn prefixed(tensors: &HashMap<String, Tensor>, prefix: &str) -> HashMap<String, Tensor> {
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
        .collect()
}

/// Optimizer state and step counter for VQ-GAN training.
pub struct VqGanTrainer {
    pub model: VqGan,
    gen_opt: Adam,
    disc_opt: Adam,
    pub step: usize,
    last_used: Vec<usize>,
    rng: ChaCha8Rng,
}

impl VqGanTrainer {
    pub fn new(model: VqGan) -> Result<Self> {
        let gen_opt = Adam::new(model.gen_params.vars(), model.config.optimizer)?;
        let disc_opt = Adam::new(model.disc_params.vars(), model.config.disc_optimizer)?;
        let last_used = vec![0; model.config.codebook_size];
        let rng = ChaCha8Rng::seed_from_u64(crate::data::mix_seed(model.config.seed, 0xC0DE));
        Ok(Self { model, gen_opt, disc_opt, step: 0, last_used, rng })
    }

    /// One generator update followed (after warm-up) by one discriminator update.
    pub fn train_step(&mut self, xs: &[SpectralImage]) -> Result<VqGanLossReport> {
        let cfg = self.model.config.clone();
        let x = self.model.spectral_batch(xs)?;
        let z_e = self.model.encode_tensor(&x)?;
        let (z_st, _, codebook_loss, commit_loss, indices) = self.model.quantize_tensor(&z_e)?;
        let x_hat = self.model.decode_tensor(&z_st)?;
        let recon = (&x_hat - &x)?.abs()?.mean_all()?;
        let adversarial = self.step >= cfg.disc_start && cfg.adv_weight > 0.0;
        let mut loss = ((&recon + (&commit_loss * cfg.commit_beta)?)? + &codebook_loss)?;
        let mut gen_adv = 0.0;
        if adversarial {
            let g = self.model.discriminate_tensor(&x_hat)?.mean_all()?.neg()?;
            gen_adv = nn::scalar(&g)?;
            loss = (loss + (g * cfg.adv_weight)?)?;
        }
        let mut report = VqGanLossReport {
            recon: nn::scalar(&recon)?,
            codebook_loss: nn::scalar(&codebook_loss)?,
            commit_loss: nn::scalar(&commit_loss)?,
            gen_adv,
            disc_loss: 0.0,
        };
        report.check(self.step)?;
        self.gen_opt.step(&loss.backward()?)?;

        if adversarial {
            let real = self.model.discriminate_tensor(&x)?;
            let fake = self.model.discriminate_tensor(&x_hat.detach())?;
            let d_loss = ((real.neg()? + 1.0)?.relu()?.mean_all()? + (fake + 1.0)?.relu()?.mean_all()?)?;
            report.disc_loss = nn::scalar(&d_loss)?;
            report.check(self.step)?;
            self.disc_opt.step(&d_loss.backward()?)?;
        }

        for &i in &indices {
            self.last_used[i] = self.step + 1;
        }
        self.step += 1;
        if cfg.dead_code_steps > 0 && self.step % cfg.dead_code_steps == 0 {
            self.restart_dead_codes(&z_e, cfg.dead_code_steps)?;
        }
        Ok(report)
    }

    /// Moves entries that went unused for `window` steps onto randomly chosen
    /// encoder outputs of the current batch.
    fn restart_dead_codes(&mut self, z_e: &Tensor, window: usize) -> Result<()> {
        let (b, c, h, w) = z_e.dims4()?;
        let vectors = z_e.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        let mut book = self.model.codebook()?;
        let mut changed = false;
        for k in 0..book.size {
            if self.step.saturating_sub(self.last_used[k]) >= window {
                let v = &vectors[self.rng.gen_range(0..vectors.len())];
                for (ch, x) in v.iter().enumerate() {
                    book.entries[k * c + ch] = *x + self.rng.gen_range(-1e-3f32..1e-3);
                }
                self.last_used[k] = self.step;
                changed = true;
            }
        }
        if changed {
            let t = Tensor::from_vec(book.entries, (book.size, c), &Device::Cpu)?.to_dtype(self.model.dtype())?;
            let (_, var) = self
                .model
                .gen_params
                .vars()
                .into_iter()
                .find(|(k, _)| k == "codebook")
                .ok_or_else(|| Error::Checkpoint("codebook parameter missing".into()))?;
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn optimizer_state(&self) -> HashMap<String, Tensor> {
        let mut out = self.gen_opt.state_tensors("opt.gen");
        out.extend(self.disc_opt.state_tensors("opt.disc"));
        out
    }

    pub fn load_optimizer_state(&mut self, tensors: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        self.gen_opt.load_state("opt.gen", tensors, step)?;
        let disc_steps = step.saturating_sub(self.model.config.disc_start);
        self.disc_opt.load_state("opt.disc", tensors, disc_steps)?;
        self.step = step;
        self.last_used = vec![step; self.model.config.codebook_size];
        Ok(())
    }
}

/// Mean absolute per-pixel difference between two spectral batches, in the
/// model's normalized coordinates.
pub fn normalized_l1(model: &VqGan, a: &[SpectralImage], b: &[SpectralImage]) -> Result<f64> {
    let ta = model.spectral_batch(a)?;
    let tb = model.spectral_batch(b)?;
    nn::scalar(&(ta - tb)?.abs()?.mean_all()?)
}
