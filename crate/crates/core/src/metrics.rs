//! Objective evaluation: Inception Score, Fréchet distance between feature
//! Gaussians, and k-NN manifold precision/recall, over pluggable extractors.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, Init, Linear, ParamStore};
use crate::spectral::{complex_stft, StftConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Real,
    Generated,
}

/// `N × F` feature matrix from one extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub rows: Vec<Vec<f64>>,
    pub source: FeatureSource,
    pub extractor: String,
}

impl FeatureSet {
    pub fn new(rows: Vec<Vec<f64>>, source: FeatureSource, extractor: impl Into<String>) -> Result<Self> {
        let f = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != f) {
            return Err(Error::Shape("feature rows have different lengths".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite feature value".into()));
        }
        Ok(Self { rows, source, extractor: extractor.into() })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map(Vec::len).unwrap_or(0)
    }

    fn gaussian(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, f) = (self.len(), self.dim());
        let mut mean = DVector::zeros(f);
        for r in &self.rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(f, f);
        for r in &self.rows {
            let d = DVector::from_column_slice(r) - &mean;
            cov += &d * d.transpose();
        }
        cov /= (n - 1) as f64;
        (mean, cov)
    }
}

/// `exp(mean_n KL(p_n ‖ p̄))` over class-probability rows.
pub fn inception_score(probs: &[Vec<f64>]) -> Result<f64> {
    let k = probs.first().map(Vec::len).unwrap_or(0);
    if probs.is_empty() || k < 2 {
        return Err(Error::InvalidInput("inception score needs at least one row over K >= 2 classes".into()));
    }
    for (i, row) in probs.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.len() != k || (sum - 1.0).abs() > 1e-5 || row.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidInput(format!("row {i} is not a probability vector (sum {sum})")));
        }
    }
    let n = probs.len() as f64;
    let marginal: Vec<f64> = (0..k).map(|j| probs.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let kl: f64 = probs
        .iter()
        .map(|row| {
            row.iter()
                .zip(&marginal)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, m)| p * (p.ln() - m.ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    Ok(kl.exp())
}

/// Symmetric positive semi-definite square root; eigenvalues within the
/// tolerance below zero are treated as zero.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-8 * scale {
                return Err(Error::Numerical(format!("matrix square root of a non-PSD matrix (eigenvalue {v})")));
            }
            *v = 0.0;
        }
        *v = v.sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussians fitted to the two feature sets.
pub fn fad(real: &FeatureSet, gen: &FeatureSet) -> Result<f64> {
    if real.dim() != gen.dim() || real.dim() == 0 {
        return Err(Error::Shape(format!("feature dimensions {} and {}", real.dim(), gen.dim())));
    }
    if real.len() < 2 || gen.len() < 2 {
        return Err(Error::InvalidInput("each feature set needs at least 2 rows".into()));
    }
    let f = real.dim();
    if real.len() <= f || gen.len() <= f {
        tracing::warn!(n_real = real.len(), n_gen = gen.len(), f, "fewer samples than features + 1; covariance is singular");
    }
    let (mu_r, cov_r) = real.gaussian();
    let (mu_g, cov_g) = gen.gaussian();
    let root_r = psd_sqrt(&cov_r)?;
    let inner = psd_sqrt(&(&root_r * &cov_g * &root_r))?;
    let mean_term = (&mu_r - &mu_g).norm_squared();
    let value = mean_term + cov_r.trace() + cov_g.trace() - 2.0 * inner.trace();
    Ok(value.max(0.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Squared distance from each point to its k-th nearest other point.
fn knn_radii(points: &[Vec<f64>], k: usize) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, q)| sq_dist(p, q)).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

fn coverage(manifold: &[Vec<f64>], radii: &[f64], queries: &[Vec<f64>]) -> f64 {
    let inside = queries
        .iter()
        .filter(|q| manifold.iter().zip(radii).any(|(m, r)| sq_dist(q, m) <= *r))
        .count();
    inside as f64 / queries.len() as f64
}

/// k-NN manifold precision (generated points inside the real manifold) and
/// recall (real points inside the generated manifold).
pub fn precision_recall(real: &FeatureSet, gen: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    if real.dim() != gen.dim() {
        return Err(Error::Shape(format!("feature dimensions {} and {}", real.dim(), gen.dim())));
    }
    if k == 0 || k >= real.len().min(gen.len()) {
        return Err(Error::InvalidInput(format!(
            "k = {k} must satisfy 1 <= k < min(N_real, N_gen) = {}",
            real.len().min(gen.len())
        )));
    }
    let precision = coverage(&real.rows, &knn_radii(&real.rows, k), &gen.rows);
    let recall = coverage(&gen.rows, &knn_radii(&gen.rows, k), &real.rows);
    Ok((precision, recall))
}

/// Audio-to-feature map, optionally with a class-probability head for IS.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn features(&self, clips: &[AudioClip]) -> Result<Vec<Vec<f64>>>;
    /// Class probabilities, or `None` when the extractor has no classifier.
    fn class_probabilities(&self, clips: &[AudioClip]) -> Result<Option<Vec<Vec<f64>>>>;
}

pub fn extract_features(clips: &[AudioClip], extractor: &dyn FeatureExtractor, source: FeatureSource) -> Result<FeatureSet> {
    if clips.is_empty() {
        return Err(Error::InvalidInput("no clips to extract features from".into()));
    }
    FeatureSet::new(extractor.features(clips)?, source, extractor.id())
}

const STAT_BANDS: usize = 16;
const TIME_SEGMENTS: usize = 4;

/// Deterministic hand-made statistics: mean log-magnitude in linearly spaced
/// bands, amplitude centroid and spread, segment loudness and zero-crossing
/// rate.
#[derive(Debug, Clone)]
pub struct SpectralStats {
    pub stft: Arc<StftConfig>,
}

impl SpectralStats {
    pub const ID: &'static str = "spectral-stats";

    pub fn dim(&self) -> usize {
        self.bands() + 3 + TIME_SEGMENTS
    }

    fn bands(&self) -> usize {
        STAT_BANDS.min(self.stft.num_bins())
    }

    pub fn clip_features(&self, clip: &AudioClip) -> Result<Vec<f64>> {
        clip.check_finite()?;
        if clip.sample_rate != self.stft.sample_rate {
            return Err(Error::InvalidInput(format!(
                "clip sample rate {} differs from {}",
                clip.sample_rate, self.stft.sample_rate
            )));
        }
        if clip.is_empty() {
            return Err(Error::InvalidInput("empty clip".into()));
        }
        let spectrum = complex_stft(&clip.samples, &self.stft);
        let bins = self.stft.num_bins();
        let floor = self.stft.eps_floor;
        let mut mean_amp = vec![0.0; bins];
        let mut mean_log = vec![0.0; bins];
        for frame in &spectrum {
            for (b, c) in frame.iter().enumerate() {
                let a = c.norm();
                mean_amp[b] += a;
                mean_log[b] += a.max(floor).ln();
            }
        }
        let frames = spectrum.len().max(1) as f64;
        mean_amp.iter_mut().for_each(|v| *v /= frames);
        mean_log.iter_mut().for_each(|v| *v /= frames);

        let bands = self.bands();
        let mut out = Vec::with_capacity(self.dim());
        for k in 0..bands {
            let (lo, hi) = (k * bins / bands, ((k + 1) * bins / bands).max(k * bins / bands + 1));
            out.push(mean_log[lo..hi].iter().sum::<f64>() / (hi - lo) as f64);
        }
        let total: f64 = mean_amp.iter().sum::<f64>().max(1e-12);
        let centroid = mean_amp.iter().enumerate().map(|(b, a)| b as f64 * a).sum::<f64>() / total;
        let spread = (mean_amp.iter().enumerate().map(|(b, a)| (b as f64 - centroid).powi(2) * a).sum::<f64>() / total).sqrt();
        out.push(centroid / bins as f64);
        out.push(spread / bins as f64);
        let zc = clip.samples.windows(2).filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0)).count();
        out.push(zc as f64 / clip.len() as f64);
        let seg = clip.len().div_ceil(TIME_SEGMENTS);
        for s in 0..TIME_SEGMENTS {
            let part = &clip.samples[(s * seg).min(clip.len())..((s + 1) * seg).min(clip.len())];
            let rms = (part.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / part.len().max(1) as f64).sqrt();
            out.push(rms.max(floor).ln());
        }
        Ok(out)
    }
}

impl FeatureExtractor for SpectralStats {
    fn id(&self) -> &str {
        Self::ID
    }

    fn features(&self, clips: &[AudioClip]) -> Result<Vec<Vec<f64>>> {
        clips.iter().map(|c| self.clip_features(c)).collect()
    }

    fn class_probabilities(&self, _clips: &[AudioClip]) -> Result<Option<Vec<Vec<f64>>>> {
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { hidden: 32, steps: 300, seed: 0, optimizer: AdamConfig { lr: 1e-2, ..AdamConfig::default() } }
    }
}

/// Small MLP over [`SpectralStats`] trained on instrument-family labels. The
/// penultimate activations are the features; the softmax head gives IS
/// probabilities.
pub struct FamilyClassifier {
    pub stats: SpectralStats,
    pub classes: Vec<String>,
    pub params: ParamStore,
    input_mean: Tensor,
    input_std: Tensor,
    fc1: Linear,
    fc2: Linear,
    head: Linear,
}

impl FamilyClassifier {
    pub const ID: &'static str = "desk-classifier";

    pub fn new(stft: Arc<StftConfig>, classes: Vec<String>, cfg: &ClassifierConfig) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Config("classifier needs at least two classes".into()));
        }
        let stats = SpectralStats { stft };
        let f = stats.dim();
        let params = ParamStore::new(cfg.seed, DType::F32);
        Ok(Self {
            input_mean: params.get("input_mean", &[f], Init::Const(0.0))?,
            input_std: params.get("input_std", &[f], Init::Const(1.0))?,
            fc1: Linear::new(&params.pp("fc1"), f, cfg.hidden)?,
            fc2: Linear::new(&params.pp("fc2"), cfg.hidden, cfg.hidden)?,
            head: Linear::new(&params.pp("head"), cfg.hidden, classes.len())?,
            stats,
            classes,
            params,
        })
    }

    fn stats_tensor(&self, clips: &[AudioClip]) -> Result<Tensor> {
        let rows = self.stats.features(clips)?;
        let f = self.stats.dim();
        let flat: Vec<f32> = rows.iter().flatten().map(|v| *v as f32).collect();
        Ok(Tensor::from_vec(flat, (rows.len(), f), &Device::Cpu)?)
    }

    fn hidden(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.broadcast_sub(&self.input_mean)?.broadcast_div(&self.input_std)?;
        let h = self.fc1.forward(&x)?.silu()?;
        Ok(self.fc2.forward(&h)?.silu()?)
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.hidden(x)?)
    }

    /// Fits the classifier; `labels` index into `classes`. Returns the loss per step.
    pub fn train(&mut self, clips: &[AudioClip], labels: &[usize], cfg: &ClassifierConfig) -> Result<Vec<f64>> {
        if clips.len() != labels.len() || clips.is_empty() {
            return Err(Error::InvalidInput("one label per clip is required".into()));
        }
        if let Some(l) = labels.iter().find(|l| **l >= self.classes.len()) {
            return Err(Error::InvalidInput(format!("label {l} outside {} classes", self.classes.len())));
        }
        let x = self.stats_tensor(clips)?;
        let mean = x.mean(0)?;
        let std = (x.broadcast_sub(&mean)?.sqr()?.mean(0)?.sqrt()? + 1e-3)?;
        let vars = self.params.vars();
        for (name, var) in &vars {
            match name.as_str() {
                "input_mean" => var.set(&mean)?,
                "input_std" => var.set(&std)?,
                _ => {}
            }
        }
        let trainable: Vec<_> = vars.into_iter().filter(|(n, _)| !n.starts_with("input_")).collect();
        let mut opt = Adam::new(trainable, cfg.optimizer)?;
        let target = Tensor::from_vec(labels.iter().map(|l| *l as u32).collect::<Vec<_>>(), labels.len(), &Device::Cpu)?;
        let mut losses = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let loss = candle_nn::loss::cross_entropy(&self.logits(&x)?, &target)?;
            losses.push(nn::scalar(&loss)?);
            opt.step(&loss.backward()?)?;
        }
        Ok(losses)
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.params.tensors()
    }

    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        self.params.load(tensors)
    }
}

impl FeatureExtractor for FamilyClassifier {
    fn id(&self) -> &str {
        Self::ID
    }

    fn features(&self, clips: &[AudioClip]) -> Result<Vec<Vec<f64>>> {
        let h = self.hidden(&self.stats_tensor(clips)?)?;
        Ok(h.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    fn class_probabilities(&self, clips: &[AudioClip]) -> Result<Option<Vec<Vec<f64>>>> {
        let logits = self.logits(&self.stats_tensor(clips)?)?.to_dtype(DType::F64)?;
        let probs = candle_nn::ops::softmax(&logits, 1)?;
        Ok(Some(probs.to_vec2::<f64>()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// `desk-classifier` (needs a trained extractor checkpoint) or `spectral-stats`.
    pub extractor: String,
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { extractor: FamilyClassifier::ID.into(), k: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `None` when the extractor has no class-probability head.
    pub is_score: Option<f64>,
    pub fad: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_real: usize,
    pub n_gen: usize,
    pub extractor: String,
    pub k: usize,
    /// Files that could not be used, with the reason.
    pub skipped: Vec<String>,
    pub created_unix: u64,
}

impl MetricReport {
    pub fn check(&self) -> Result<()> {
        let ok = self.is_score.map_or(true, |s| s >= 1.0 - 1e-12)
            && self.fad >= 0.0
            && (0.0..=1.0).contains(&self.precision)
            && (0.0..=1.0).contains(&self.recall);
        if ok {
            Ok(())
        } else {
            Err(Error::Numerical(format!("metric report out of range: {self:?}")))
        }
    }
}

/// Readable mono WAVs in `dir`, sorted by file name, plus skip reasons.
pub fn read_wav_dir(dir: &Path) -> Result<(Vec<(PathBuf, AudioClip)>, Vec<String>)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    let mut clips = Vec::new();
    let mut skipped = Vec::new();
    for p in paths {
        match AudioClip::read_wav(&p).and_then(|c| c.check_finite().map(|_| c)) {
            Ok(c) => clips.push((p, c)),
            Err(e) => skipped.push(format!("{}: {e}", p.display())),
        }
    }
    Ok((clips, skipped))
}

/// Extracts features from both directories and computes every metric.
pub fn evaluate(real_dir: &Path, gen_dir: &Path, extractor: &dyn FeatureExtractor, cfg: &EvalConfig) -> Result<MetricReport> {
    let (real, mut skipped) = read_wav_dir(real_dir)?;
    let (gen, skipped_gen) = read_wav_dir(gen_dir)?;
    skipped.extend(skipped_gen);
    for (name, side) in [("real", &real), ("generated", &gen)] {
        if side.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "{name} directory has {} readable WAV files (need 2); unreadable: [{}]",
                side.len(),
                skipped.join("; ")
            )));
        }
    }
    let real_clips: Vec<AudioClip> = real.into_iter().map(|(_, c)| c).collect();
    let gen_clips: Vec<AudioClip> = gen.into_iter().map(|(_, c)| c).collect();
    let real_f = extract_features(&real_clips, extractor, FeatureSource::Real)?;
    let gen_f = extract_features(&gen_clips, extractor, FeatureSource::Generated)?;
    let k = cfg.k.min(real_f.len().min(gen_f.len()) - 1).max(1);
    let (precision, recall) = precision_recall(&real_f, &gen_f, k)?;
    let is_score = match extractor.class_probabilities(&gen_clips)? {
        Some(p) => Some(inception_score(&p)?),
        None => None,
    };
    let report = MetricReport {
        is_score,
        fad: fad(&real_f, &gen_f)?,
        precision,
        recall,
        n_real: real_f.len(),
        n_gen: gen_f.len(),
        extractor: extractor.id().to_string(),
        k,
        skipped,
        created_unix: std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    report.check()?;
    Ok(report)
}
