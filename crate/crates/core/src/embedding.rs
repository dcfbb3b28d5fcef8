//! Shared text/timbre embedding space learned with a symmetric InfoNCE loss.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, Augmenter, AugmentConfig, NoteRecord};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, Conv2d, Embedding as EmbeddingTable, GroupNorm, Init, LayerNorm, Linear, ParamStore};
use crate::vqgan::LatentCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Timbre,
}

/// Unit-norm vector in the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f32>,
    pub modality: Modality,
}

impl Embedding {
    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| *a as f64 * *b as f64).sum()
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.vector.clone(), (1, self.vector.len()), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn from_rows(t: &Tensor, modality: Modality) -> Result<Vec<Self>> {
        Ok(t.to_dtype(DType::F32)?
            .to_vec2::<f32>()?
            .into_iter()
            .map(|vector| Self { vector, modality })
            .collect())
    }
}

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const EMPTY: u32 = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<empty>"];

/// Lowercased word tokens; punctuation separates words, hyphens are kept.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Dense token ids with reserved padding, unknown and empty-string ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if !all.contains(&t) {
                all.push(t);
            }
        }
        let ids = all.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens: all, ids }
    }

    /// Sorted vocabulary of every word in `texts`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: std::collections::BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        Self::from_tokens(words)
    }

    /// One token per line; the first three lines must be the special tokens.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<String> = text.lines().map(|l| l.trim_end().to_string()).filter(|l| !l.is_empty()).collect();
        if lines.len() < 3 || lines[..3] != SPECIALS.map(String::from) {
            return Err(Error::Config(format!("vocabulary must start with {SPECIALS:?}")));
        }
        Ok(Self::from_tokens(lines.into_iter().skip(3)))
    }

    pub fn to_text(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    /// Token ids truncated to `max_len`; the empty string becomes `[EMPTY]`.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return vec![EMPTY];
        }
        tokens.iter().take(max_len).map(|t| self.id(t)).collect()
    }
}

/// Text-line to vector table that overrides the trained text encoder.
#[derive(Debug, Clone, Default)]
pub struct ExternalTextEmbeddings {
    table: BTreeMap<String, Vec<f32>>,
}

impl ExternalTextEmbeddings {
    /// Tab-separated `text<TAB>v1 v2 ... vd` lines.
    pub fn parse(text: &str, dim: usize) -> Result<Self> {
        let mut table = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (key, values) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("external embeddings line {}: missing tab", i + 1)))?;
            let v: Vec<f32> = values
                .split_whitespace()
                .map(|s| s.parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("external embeddings line {}: {e}", i + 1)))?;
            if v.len() != dim {
                return Err(Error::Config(format!(
                    "external embeddings line {}: {} values, expected {dim}",
                    i + 1,
                    v.len()
                )));
            }
            let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(Error::Config(format!("external embeddings line {}: zero vector", i + 1)));
            }
            table.insert(key.to_string(), v.iter().map(|x| (*x as f64 / norm) as f32).collect());
        }
        Ok(Self { table })
    }

    pub fn get(&self, text: &str) -> Option<&Vec<f32>> {
        self.table.get(text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub max_tokens: usize,
    pub timbre_channels: usize,
    pub init_temperature: f64,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub external_text_embeddings: Option<std::path::PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            text_width: 64,
            text_layers: 2,
            text_heads: 4,
            max_tokens: 32,
            timbre_channels: 32,
            init_temperature: 0.07,
            seed: 0,
            optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            external_text_embeddings: None,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.text_width == 0 || self.text_heads == 0 || self.text_width % self.text_heads != 0 {
            return Err(Error::Config("embedding: text_width must be a positive multiple of text_heads".into()));
        }
        if self.timbre_channels % 4 != 0 || self.timbre_channels == 0 {
            return Err(Error::Config("embedding.timbre_channels must be a positive multiple of 4".into()));
        }
        if !(self.init_temperature >= TAU_MIN && self.init_temperature <= TAU_MAX) {
            return Err(Error::Config(format!("embedding.init_temperature must lie in [{TAU_MIN}, {TAU_MAX}]")));
        }
        Ok(())
    }
}

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 1.0;

#[derive(Debug, Clone)]
struct AttentionBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl AttentionBlock {
    fn new(ps: &ParamStore, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&ps.pp("norm1"), width)?,
            qkv: Linear::new(&ps.pp("qkv"), width, 3 * width)?,
            proj: Linear::new(&ps.pp("proj"), width, width)?,
            norm2: LayerNorm::new(&ps.pp("norm2"), width)?,
            fc1: Linear::new(&ps.pp("fc1"), width, 4 * width)?,
            fc2: Linear::new(&ps.pp("fc2"), 4 * width, width)?,
            heads,
        })
    }

    /// `x`: `(B, L, W)`; `key_bias`: `(B, 1, 1, L)` additive mask.
    fn forward(&self, x: &Tensor, key_bias: &Tensor) -> Result<Tensor> {
        let (b, l, w) = x.dims3()?;
        let hd = w / self.heads;
        let qkv = self.qkv.forward(&self.norm1.forward(x)?)?.reshape((b, l, 3, self.heads, hd))?;
        let q = qkv.narrow(2, 0, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        let k = qkv.narrow(2, 1, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        let v = qkv.narrow(2, 2, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?.broadcast_add(key_bias)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, l, w))?;
        let x = (x + self.proj.forward(&out)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        Ok((x + h)?)
    }
}

/// Token embedding, a small pre-norm self-attention stack, masked mean
/// pooling and a linear projection.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    tokens: EmbeddingTable,
    positions: Tensor,
    blocks: Vec<AttentionBlock>,
    norm: LayerNorm,
    proj: Linear,
    max_tokens: usize,
}

impl TextEncoder {
    fn new(ps: &ParamStore, cfg: &EmbeddingConfig, vocab_size: usize) -> Result<Self> {
        let blocks = (0..cfg.text_layers)
            .map(|i| AttentionBlock::new(&ps.pp(format!("block{i}")), cfg.text_width, cfg.text_heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            tokens: EmbeddingTable::new(&ps.pp("tokens"), vocab_size, cfg.text_width)?,
            positions: ps.get("positions", &[cfg.max_tokens, cfg.text_width], Init::Normal(0.02))?,
            blocks,
            norm: LayerNorm::new(&ps.pp("norm"), cfg.text_width)?,
            proj: Linear::new(&ps.pp("proj"), cfg.text_width, cfg.dim)?,
            max_tokens: cfg.max_tokens,
        })
    }

    /// Unnormalized `(B, dim)` projections.
    fn forward(&self, ids: &[Vec<u32>]) -> Result<Tensor> {
        let b = ids.len();
        let l = ids.iter().map(Vec::len).max().unwrap_or(1).max(1);
        let mut flat = vec![PAD; b * l];
        let mut mask = vec![0f32; b * l];
        for (i, seq) in ids.iter().enumerate() {
            for (j, &t) in seq.iter().enumerate() {
                flat[i * l + j] = t;
                mask[i * l + j] = 1.0;
            }
        }
        let dev = Device::Cpu;
        let dtype = self.positions.dtype();
        let ids_t = Tensor::from_vec(flat, (b, l), &dev)?;
        let mask_t = Tensor::from_vec(mask, (b, l), &dev)?.to_dtype(dtype)?;
        let key_bias = ((mask_t.clone() - 1.0)? * 1e9)?.reshape((b, 1, 1, l))?;
        let mut x = self.tokens.forward(&ids_t)?.broadcast_add(&self.positions.narrow(0, 0, l)?.unsqueeze(0)?)?;
        for block in &self.blocks {
            x = block.forward(&x, &key_bias)?;
        }
        let x = self.norm.forward(&x)?;
        let m = mask_t.unsqueeze(2)?;
        let pooled = x.broadcast_mul(&m)?.sum(1)?.broadcast_div(&m.sum(1)?)?;
        self.proj.forward(&pooled)
    }
}

/// Convolutional stack over the quantized latent, global average pooling and
/// a linear projection.
#[derive(Debug, Clone)]
pub struct TimbreEncoder {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    conv3: Conv2d,
    proj: Linear,
    latent_channels: usize,
}

impl TimbreEncoder {
    fn new(ps: &ParamStore, cfg: &EmbeddingConfig, latent_channels: usize) -> Result<Self> {
        let c = cfg.timbre_channels;
        Ok(Self {
            conv1: Conv2d::new(&ps.pp("conv1"), latent_channels, c, 3, 1, 1)?,
            norm1: GroupNorm::new(&ps.pp("norm1"), c, 4)?,
            conv2: Conv2d::new(&ps.pp("conv2"), c, 2 * c, 3, 2, 1)?,
            norm2: GroupNorm::new(&ps.pp("norm2"), 2 * c, 4)?,
            conv3: Conv2d::new(&ps.pp("conv3"), 2 * c, 2 * c, 3, 1, 1)?,
            proj: Linear::new(&ps.pp("proj"), 4 * c, cfg.dim)?,
            latent_channels,
        })
    }

    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.latent_channels {
            return Err(Error::Shape(format!("timbre encoder expects {} channels, got {c}", self.latent_channels)));
        }
        let h = self.norm1.forward(&self.conv1.forward(z)?)?.silu()?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?.silu()?;
        let h = self.conv3.forward(&h)?.silu()?;
        // Mean and max pooling over all positions keep both average level and peaks.
        let flat = h.flatten_from(2)?;
        let pooled = Tensor::cat(&[flat.mean(2)?, flat.max(2)?], 1)?;
        self.proj.forward(&pooled)
    }
}

/// Paired text and timbre encoders with a learnable temperature.
pub struct EmbeddingModel {
    pub config: EmbeddingConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    text: TextEncoder,
    timbre: TimbreEncoder,
    log_tau: Tensor,
    latent_shape: (usize, usize, usize),
    external: Option<ExternalTextEmbeddings>,
}

impl EmbeddingModel {
    pub fn new(config: EmbeddingConfig, vocab: Vocabulary, latent_shape: (usize, usize, usize), dtype: DType) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::new(config.seed, dtype);
        let text = TextEncoder::new(&params.pp("text"), &config, vocab.len())?;
        let timbre = TimbreEncoder::new(&params.pp("timbre"), &config, latent_shape.0)?;
        let log_tau = params.get("log_tau", &[1], Init::Const(config.init_temperature.ln()))?;
        let external = match &config.external_text_embeddings {
            Some(p) => Some(ExternalTextEmbeddings::parse(&std::fs::read_to_string(p)?, config.dim)?),
            None => None,
        };
        Ok(Self { config, vocab, params, text, timbre, log_tau, latent_shape, external })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.latent_shape
    }

    /// Current temperature, clamped to `[TAU_MIN, TAU_MAX]`.
    pub fn temperature_tensor(&self) -> Result<Tensor> {
        Ok(self.log_tau.exp()?.clamp(TAU_MIN, TAU_MAX)?)
    }

    pub fn temperature(&self) -> Result<f64> {
        nn::scalar(&self.temperature_tensor()?.squeeze(0)?)
    }

    /// Unit-norm `(B, dim)` text embeddings.
    pub fn text_tensor(&self, texts: &[&str]) -> Result<Tensor> {
        let ids: Vec<Vec<u32>> = texts.iter().map(|t| self.vocab.encode(t, self.text.max_tokens)).collect();
        let emb = nn::l2_normalize(&self.text.forward(&ids)?)?;
        let Some(external) = &self.external else { return Ok(emb) };
        let rows = texts
            .iter()
            .enumerate()
            .map(|(i, t)| match external.get(t) {
                Some(v) => Ok(Tensor::from_vec(v.clone(), (1, v.len()), &Device::Cpu)?.to_dtype(self.dtype())?),
                None => Ok(emb.narrow(0, i, 1)?),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&rows, 0)?)
    }

    /// Unit-norm `(B, dim)` timbre embeddings of a `(B, C, h, w)` latent batch.
    pub fn timbre_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = z.dims4()?;
        if (c, h, w) != self.latent_shape {
            return Err(Error::Shape(format!("latent {:?} does not match configured {:?}", (c, h, w), self.latent_shape)));
        }
        nn::l2_normalize(&self.timbre.forward(z)?)
    }

    pub fn encode_text(&self, text: &str) -> Result<Embedding> {
        Ok(Embedding::from_rows(&self.text_tensor(&[text])?, Modality::Text)?.remove(0))
    }

    /// Embedding of the empty description, used as the unconditional input.
    pub fn null_embedding(&self) -> Result<Embedding> {
        self.encode_text("")
    }

    pub fn encode_timbre(&self, z: &LatentCode) -> Result<Embedding> {
        Ok(self.encode_timbre_batch(std::slice::from_ref(z))?.remove(0))
    }

    pub fn encode_timbre_batch(&self, zs: &[LatentCode]) -> Result<Vec<Embedding>> {
        let t = LatentCode::stack(zs, self.dtype())?;
        Embedding::from_rows(&self.timbre_tensor(&t)?, Modality::Timbre)
    }
}

/// Symmetric cross-entropy over the similarity matrix `text · timbreᵀ / τ`
/// with matching pairs on the diagonal. Differentiable in both inputs and `τ`.
pub fn contrastive_loss_tensor(text: &Tensor, timbre: &Tensor, tau: &Tensor) -> Result<Tensor> {
    let (n, d) = text.dims2()?;
    if timbre.dims2()? != (n, d) {
        return Err(Error::Shape(format!("text {:?} vs timbre {:?}", text.dims(), timbre.dims())));
    }
    let logits = text.matmul(&timbre.t()?)?.broadcast_div(tau)?;
    let eye = Tensor::eye(n, logits.dtype(), &Device::Cpu)?;
    let rows = candle_nn::ops::log_softmax(&logits, 1)?;
    let cols = candle_nn::ops::log_softmax(&logits, 0)?;
    let diag_rows = (rows * &eye)?.sum_all()?;
    let diag_cols = (cols * &eye)?.sum_all()?;
    Ok(((diag_rows + diag_cols)? * (-0.5 / n as f64))?)
}

/// Validating front end of [`contrastive_loss_tensor`] for host matrices.
pub fn contrastive_loss(text: &[Vec<f64>], timbre: &[Vec<f64>], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")));
    }
    if text.is_empty() || text.len() != timbre.len() {
        return Err(Error::Shape(format!("need N >= 1 matching rows, got {} and {}", text.len(), timbre.len())));
    }
    for row in text.iter().chain(timbre) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidInput(format!("row norm {norm} is not unit within 1e-3")));
        }
    }
    let to_tensor = |rows: &[Vec<f64>]| -> Result<Tensor> {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu)?)
    };
    let tau_t = Tensor::new(&[tau], &Device::Cpu)?;
    nn::scalar(&contrastive_loss_tensor(&to_tensor(text)?, &to_tensor(timbre)?, &tau_t)?)
}

/// Training state for the embedding stage. Latents come from a frozen VQ-GAN.
pub struct EmbeddingTrainer {
    pub model: EmbeddingModel,
    opt: Adam,
    pub step: usize,
    seed: u64,
}

impl EmbeddingTrainer {
    pub fn new(model: EmbeddingModel) -> Result<Self> {
        let opt = Adam::new(model.params.vars(), model.config.optimizer)?;
        let seed = mix_seed(model.config.seed, 0xE3B);
        Ok(Self { model, opt, step: 0, seed })
    }

    /// One contrastive update on a batch of latents and their descriptions.
    pub fn train_step(&mut self, latents: &Tensor, texts: &[&str]) -> Result<f64> {
        let text = self.model.text_tensor(texts)?;
        let timbre = self.model.timbre_tensor(latents)?;
        let loss = contrastive_loss_tensor(&text, &timbre, &self.model.temperature_tensor()?)?;
        let value = nn::scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("embedding step {}: loss {value}", self.step)));
        }
        self.opt.step(&loss.backward()?)?;
        self.step += 1;
        Ok(value)
    }

    /// Samples one description per record for the current step.
    pub fn sample_descriptions(
        &self,
        records: &[NoteRecord],
        augment: &AugmentConfig,
        augmenter: &dyn Augmenter,
    ) -> Result<Vec<String>> {
        records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let seed = mix_seed(mix_seed(self.seed, self.step as u64), i as u64);
                let style = augment.sample_style(&mut ChaCha8Rng::seed_from_u64(seed));
                Ok(augmenter.describe(r, style, seed)?.text)
            })
            .collect()
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
    use rand::Rng;

    fn random_unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    /// Scalar re-implementation with explicit exponential sums.
    fn oracle(text: &[Vec<f64>], timbre: &[Vec<f64>], tau: f64) -> f64 {
        let n = text.len();
        let s = |i: usize, j: usize| text[i].iter().zip(&timbre[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
        let mut total = 0.0;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| s(i, j).exp()).sum();
            total += -(s(i, i).exp() / row).ln();
            let col: f64 = (0..n).map(|j| s(j, i).exp()).sum();
            total += -(s(i, i).exp() / col).ln();
        }
        total / (2.0 * n as f64)
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_unit_rows(&mut rng, 1, 5);
        let b = random_unit_rows(&mut rng, 1, 5);
        assert!(contrastive_loss(&a, &b, 0.07).unwrap().abs() < 1e-12);
    }

    #[test]
    fn constant_similarity_gives_ln_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let row = random_unit_rows(&mut rng, 1, 6).remove(0);
        for n in [2usize, 3, 7] {
            let rows = vec![row.clone(); n];
            let loss = contrastive_loss(&rows, &rows, 0.5).unwrap();
            assert!((loss - (n as f64).ln()).abs() < 1e-9, "n={n}: {loss}");
        }
    }

    #[test]
    fn matches_explicit_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_unit_rows(&mut rng, 4, 8);
        let b = random_unit_rows(&mut rng, 4, 8);
        let ours = contrastive_loss(&a, &b, 0.07).unwrap();
        assert!((ours - oracle(&a, &b, 0.07)).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_unit_rows(&mut rng, 2, 3);
        assert!(contrastive_loss(&a, &a, 0.0).is_err());
        let mut scaled = a.clone();
        scaled[0].iter_mut().for_each(|v| *v *= 1.01);
        assert!(contrastive_loss(&scaled, &a, 0.1).is_err());
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_unit_rows(&mut rng, 5, 4);
        let b = random_unit_rows(&mut rng, 5, 4);
        let perm = [3, 0, 4, 1, 2];
        let pa: Vec<_> = perm.iter().map(|&i| a[i].clone()).collect();
        let pb: Vec<_> = perm.iter().map(|&i| b[i].clone()).collect();
        let l1 = contrastive_loss(&a, &b, 0.2).unwrap();
        let l2 = contrastive_loss(&pa, &pb, 0.2).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_as_diagonal_similarity_grows() {
        // Off-diagonal similarities fixed by construction: the timbre rows
        // rotate toward their text partner inside the partner's own plane.
        let tau = 0.3;
        let loss_with = |diag: f64| {
            let s = [[diag, 0.1, -0.2], [0.3, diag, 0.0], [-0.1, 0.2, diag]];
            let mut total = 0.0;
            for i in 0..3 {
                let row: f64 = (0..3).map(|j| (s[i][j] / tau).exp()).sum();
                let col: f64 = (0..3).map(|j| (s[j][i] / tau).exp()).sum();
                total += -(s[i][i] / tau) + row.ln() - (s[i][i] / tau) + col.ln();
            }
            total / 6.0
        };
        let mut prev = f64::INFINITY;
        for diag in [0.0, 0.2, 0.4, 0.6, 0.8] {
            let l = loss_with(diag);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d) = (3, 5);
        let a = random_unit_rows(&mut rng, n, d);
        let b = random_unit_rows(&mut rng, n, d);
        let flat = |rows: &[Vec<f64>]| rows.iter().flat_map(|r| r.iter().copied()).collect::<Vec<_>>();
        let tau = Tensor::new(&[0.2f64], &Device::Cpu).unwrap();
        let loss_at = |ta: &[f64], tb: &[f64]| {
            let x = Tensor::from_vec(ta.to_vec(), (n, d), &Device::Cpu).unwrap();
            let y = Tensor::from_vec(tb.to_vec(), (n, d), &Device::Cpu).unwrap();
            nn::scalar(&contrastive_loss_tensor(&x, &y, &tau).unwrap()).unwrap()
        };
        let (fa, fb) = (flat(&a), flat(&b));
        let va = candle_core::Var::from_vec(fa.clone(), (n, d), &Device::Cpu).unwrap();
        let vb = candle_core::Var::from_vec(fb.clone(), (n, d), &Device::Cpu).unwrap();
        let grads = contrastive_loss_tensor(va.as_tensor(), vb.as_tensor(), &tau).unwrap().backward().unwrap();
        let ga = grads.get(va.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let gb = grads.get(vb.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        for i in 0..n * d {
            for (which, g) in [(0, &ga), (1, &gb)] {
                let (mut p, mut m) = if which == 0 { (fa.clone(), fa.clone()) } else { (fb.clone(), fb.clone()) };
                p[i] += h;
                m[i] -= h;
                let fd = if which == 0 {
                    (loss_at(&p, &fb) - loss_at(&m, &fb)) / (2.0 * h)
                } else {
                    (loss_at(&fa, &p) - loss_at(&fa, &m)) / (2.0 * h)
                };
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                assert!(rel <= 1e-4, "input {which} component {i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn temperature_scaling_preserves_retrieval_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_unit_rows(&mut rng, 6, 4);
        let b = random_unit_rows(&mut rng, 6, 4);
        let ranking = |tau: f64| -> Vec<usize> {
            a.iter()
                .map(|row| {
                    (0..b.len())
                        .max_by(|&i, &j| {
                            let si: f64 = row.iter().zip(&b[i]).map(|(x, y)| x * y / tau).sum();
                            let sj: f64 = row.iter().zip(&b[j]).map(|(x, y)| x * y / tau).sum();
                            si.partial_cmp(&sj).unwrap()
                        })
                        .unwrap()
                })
                .collect()
        };
        assert_ne!(contrastive_loss(&a, &b, 0.05).unwrap(), contrastive_loss(&a, &b, 0.5).unwrap());
        assert_eq!(ranking(0.05), ranking(0.5));
    }

    fn small_model(vocab: Vocabulary) -> EmbeddingModel {
        let cfg = EmbeddingConfig { dim: 16, text_width: 16, text_heads: 2, text_layers: 1, timbre_channels: 8, ..Default::default() };
        EmbeddingModel::new(cfg, vocab, (2, 4, 8), DType::F32).unwrap()
    }

    #[test]
    fn encoders_are_deterministic_and_unit_norm() {
        let model = small_model(Vocabulary::build(["bright, guitar", "dark flute"]));
        let empty = model.encode_text("").unwrap();
        assert!((empty.norm() - 1.0).abs() <= 1e-5);
        assert_eq!(model.encode_text("bright guitar").unwrap(), model.encode_text("bright guitar").unwrap());
        // Unknown words fall back to UNK rather than failing.
        assert!((model.encode_text("glassy harpsichord").unwrap().norm() - 1.0).abs() <= 1e-5);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let zs: Vec<LatentCode> = (0..3)
            .map(|_| LatentCode::new((0..64).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), 2, 4, 8, true).unwrap())
            .collect();
        let batch = model.encode_timbre_batch(&zs).unwrap();
        for (z, eb) in zs.iter().zip(&batch) {
            let single = model.encode_timbre(z).unwrap();
            assert!((single.norm() - 1.0).abs() <= 1e-5);
            assert_eq!(single, model.encode_timbre(z).unwrap());
            for (x, y) in single.vector.iter().zip(&eb.vector) {
                assert!((x - y).abs() < 1e-5);
            }
        }
        let wrong = LatentCode::new(vec![0.0; 3 * 4 * 8], 3, 4, 8, true).unwrap();
        assert!(model.encode_timbre(&wrong).is_err());
    }

    #[test]
    fn vocabulary_reserves_specials_and_round_trips() {
        let vocab = Vocabulary::build(["Bright, guitar!", "dark"]);
        assert_eq!(vocab.id("<pad>"), PAD);
        assert_eq!(vocab.id("<empty>"), EMPTY);
        assert_eq!(vocab.encode("", 8), vec![EMPTY]);
        assert_eq!(vocab.encode("zither", 8), vec![UNK]);
        assert_eq!(vocab.encode("bright guitar", 1).len(), 1);
        assert_eq!(Vocabulary::parse(&vocab.to_text()).unwrap(), vocab);
        assert!(Vocabulary::parse("a\nb\n").is_err());
    }

    #[test]
    fn external_table_overrides_text_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.tsv");
        let row: Vec<String> = (0..16).map(|i| if i == 3 { "2.0".into() } else { "0".into() }).collect();
        std::fs::write(&path, format!("custom prompt\t{}\n", row.join(" "))).unwrap();
        let cfg = EmbeddingConfig {
            dim: 16,
            text_width: 16,
            text_heads: 2,
            text_layers: 1,
            timbre_channels: 8,
            external_text_embeddings: Some(path),
            ..Default::default()
        };
        let model = EmbeddingModel::new(cfg, Vocabulary::build(["x"]), (2, 4, 8), DType::F32).unwrap();
        let e = model.encode_text("custom prompt").unwrap();
        assert_eq!(e.vector[3], 1.0);
        assert!((model.encode_text("other").unwrap().norm() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn contrastive_overfit_retrieves_pairs() {
        let texts = ["a b", "c d", "e f", "g h", "a c", "b d", "e g", "f h"];
        let model = small_model(Vocabulary::build(texts));
        let mut trainer = EmbeddingTrainer::new(model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let latents = nn::randn(&mut rng, &[8, 2, 4, 8], DType::F32).unwrap();
        for _ in 0..300 {
            trainer.train_step(&latents, &texts).unwrap();
        }
        let text = Embedding::from_rows(&trainer.model.text_tensor(&texts).unwrap(), Modality::Text).unwrap();
        let timbre = Embedding::from_rows(&trainer.model.timbre_tensor(&latents).unwrap(), Modality::Timbre).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    assert!(text[i].cosine(&timbre[i]) > text[i].cosine(&timbre[j]), "pair {i} vs {j}");
                }
            }
        }
    }
}
