//! Stage training driven by a [`RunConfig`]: seed-determined batches, loss
//! CSVs, atomic checkpoints and resume from the last saved step.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::DType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::audio::AudioClip;
use crate::checkpoint::{self, Checkpoint, CheckpointDir, CheckpointMeta, Stage};
use crate::config::RunConfig;
use crate::data::{load_manifest, load_note_audio, mix_seed, Augmenter, DescriptionStyle, NoteRecord};
use crate::diffusion::{embedding_rows, latent_scale_for, DiffusionModel, DiffusionTrainer};
use crate::embedding::{EmbeddingModel, EmbeddingTrainer, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::FamilyClassifier;
use crate::spectral::{stft_plus, SpectralImage, StftConfig};
use crate::vqgan::{LatentCode, VqGan, VqGanConfig, VqGanTrainer};

const DTYPE: DType = DType::F32;

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Ignore an existing checkpoint and start from initialization.
    pub fresh: bool,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub stage: Stage,
    /// Step the run started from (non-zero when resumed).
    pub start_step: usize,
    pub step: usize,
    pub checkpoint: PathBuf,
    pub sha256: String,
    pub loss_csv: PathBuf,
    pub last_loss: Option<f64>,
}

/// Notes of the configured manifest, loaded once per run.
pub struct TrainingSet {
    pub records: Vec<NoteRecord>,
    /// Peak-normalized clips of the configured duration.
    pub clips: Vec<AudioClip>,
}

impl TrainingSet {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let manifest = cfg
            .data
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Config("data.manifest is required for training".into()))?;
        let vocab = cfg.data.augment.vocabulary()?;
        let records = load_manifest(manifest, &vocab)?;
        if records.is_empty() {
            return Err(Error::Config(format!("{}: manifest has no records", manifest.display())));
        }
        let clips = records.iter().map(|r| load_note_audio(r, &cfg.stft)).collect::<Result<Vec<_>>>()?;
        Ok(Self { records, clips })
    }

    /// Spectral images cropped/padded to the model grid of factor `r`.
    pub fn spectra(&self, stft: &Arc<StftConfig>, r: usize) -> Result<Vec<SpectralImage>> {
        self.clips.iter().map(|c| Ok(stft_plus(c, stft)?.to_model_grid(r))).collect()
    }
}

/// Indices of the batch for `step`: a fresh shuffle per step, truncated to
/// `batch` (all items when the set is smaller).
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, step as u64)));
    idx.truncate(batch.min(n));
    idx
}

/// Loss CSV that survives resume: rows at or past the resume step are dropped
/// before appending, so a resumed run produces the same file as an
/// uninterrupted one.
struct LossLog {
    file: std::fs::File,
}

impl LossLog {
    fn open(path: &Path, header: &str, keep_before: usize) -> Result<Self> {
        let mut kept = String::new();
        if keep_before > 0 {
            if let Ok(text) = std::fs::read_to_string(path) {
                for line in text.lines().skip(1) {
                    let step: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
                    if step.is_some_and(|s| s < keep_before) {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{header}")?;
        file.write_all(kept.as_bytes())?;
        Ok(Self { file })
    }

    fn append(&mut self, step: usize, values: &[f64]) -> Result<()> {
        let cols: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        writeln!(self.file, "{step},{}", cols.join(","))?;
        Ok(())
    }
}

/// Runs one stage to `train.<stage>.steps` (or `extractor.steps`).
pub fn train_stage(cfg: &RunConfig, stage: Stage, opts: &TrainOptions) -> Result<TrainReport> {
    let ck = CheckpointDir::new(&cfg.checkpoint_dir);
    ck.require_upstream(stage)?;
    match stage {
        Stage::Vqgan => train_vqgan(cfg, &ck, opts),
        Stage::Embedding => train_embedding(cfg, &ck, opts),
        Stage::Diffusion => train_diffusion(cfg, &ck, opts),
        Stage::Extractor => train_extractor(cfg, &ck),
    }
}

/// Existing checkpoint to resume from, if it matches the requested setup.
fn resume_point(
    ck: &CheckpointDir,
    stage: Stage,
    config: &serde_json::Value,
    upstream: &BTreeMap<String, String>,
    opts: &TrainOptions,
) -> Result<Option<Checkpoint>> {
    if opts.fresh || !ck.exists(stage) {
        return Ok(None);
    }
    let existing = ck.load(stage)?;
    if &existing.meta.config != config || &existing.meta.upstream != upstream {
        return Err(Error::Config(format!(
            "{} was trained with a different configuration or upstream checkpoint; use --fresh to restart it",
            ck.path(stage).display()
        )));
    }
    if !existing.has_optimizer_state() {
        return Err(Error::Checkpoint(format!("{} has no optimizer state to resume from", ck.path(stage).display())));
    }
    Ok(Some(existing))
}

fn report(stage: Stage, ck: &CheckpointDir, start_step: usize, step: usize, sha256: String, last_loss: Option<f64>) -> TrainReport {
    TrainReport {
        stage,
        start_step,
        step,
        checkpoint: ck.path(stage),
        sha256,
        loss_csv: ck.loss_path(stage),
        last_loss,
    }
}

fn stft_of(cfg: &RunConfig) -> Arc<StftConfig> {
    Arc::new(cfg.stft.clone())
}

pub(crate) fn vqgan_config_json(stft: &StftConfig, vqgan: &VqGanConfig) -> serde_json::Value {
    json!({ "stft": stft, "vqgan": vqgan })
}

fn train_vqgan(cfg: &RunConfig, ck: &CheckpointDir, opts: &TrainOptions) -> Result<TrainReport> {
    let schedule = cfg.train.vqgan;
    let stft = stft_of(cfg);
    let config = vqgan_config_json(&cfg.stft, &cfg.vqgan);
    let upstream = BTreeMap::new();
    let resume = resume_point(ck, Stage::Vqgan, &config, &upstream, opts)?;
    let set = TrainingSet::load(cfg)?;
    let spectra = set.spectra(&stft, cfg.vqgan.r)?;

    let mut trainer = VqGanTrainer::new(VqGan::new(cfg.vqgan.clone(), stft, DTYPE)?)?;
    if let Some(existing) = &resume {
        trainer.model.load_tensors(&existing.model_tensors())?;
        trainer.load_optimizer_state(&existing.tensors, existing.meta.step)?;
    }
    let start = trainer.step;
    if start >= schedule.steps && resume.is_some() {
        let sha = checkpoint::file_sha256(&ck.path(Stage::Vqgan))?;
        return Ok(report(Stage::Vqgan, ck, start, start, sha, None));
    }
    let (_, gh, gw) = cfg.latent_shape();
    let mut log = LossLog::open(&ck.loss_path(Stage::Vqgan), "step,recon,codebook,commit,gen_adv,disc", start)?;
    let save = |t: &VqGanTrainer| -> Result<String> {
        let mut tensors = t.model.tensors();
        tensors.extend(t.optimizer_state());
        let meta = CheckpointMeta {
            stage: Stage::Vqgan,
            step: t.step,
            config: config.clone(),
            extra: [("latent_shape".to_string(), json!([cfg.vqgan.latent_channels, gh, gw]))].into_iter().collect(),
            upstream: upstream.clone(),
        };
        checkpoint::save(&ck.path(Stage::Vqgan), &tensors, &meta)
    };
    let batch_seed = mix_seed(cfg.vqgan.seed, 0xBA7C);
    let mut last = None;
    while trainer.step < schedule.steps {
        let step = trainer.step;
        let xs: Vec<SpectralImage> =
            batch_indices(spectra.len(), schedule.batch_size, batch_seed, step).into_iter().map(|i| spectra[i].clone()).collect();
        let r = trainer.train_step(&xs)?;
        log.append(step, &[r.recon, r.codebook_loss, r.commit_loss, r.gen_adv, r.disc_loss])?;
        last = Some(r.recon);
        if schedule.save_every > 0 && trainer.step % schedule.save_every == 0 && trainer.step < schedule.steps {
            save(&trainer)?;
        }
        tracing::debug!(stage = "vqgan", step, recon = r.recon);
    }
    let sha = save(&trainer)?;
    Ok(report(Stage::Vqgan, ck, start, trainer.step, sha, last))
}

/// Rebuilds the VQ-GAN from its checkpoint; returns it with the codec config
/// it was trained with.
pub fn load_vqgan(ck: &Checkpoint) -> Result<(VqGan, StftConfig)> {
    #[derive(serde::Deserialize)]
    struct Saved {
        stft: StftConfig,
        vqgan: VqGanConfig,
    }
    let saved: Saved = ck.config()?;
    let model = VqGan::new(saved.vqgan, Arc::new(saved.stft.clone()), DTYPE)?;
    model.load_tensors(&ck.model_tensors())?;
    Ok((model, saved.stft))
}

pub fn load_embedding(ck: &Checkpoint, latent_shape: (usize, usize, usize)) -> Result<EmbeddingModel> {
    let vocab_text: String = ck.extra("vocab")?;
    let model = EmbeddingModel::new(ck.config()?, Vocabulary::parse(&vocab_text)?, latent_shape, DTYPE)?;
    model.params.load(&ck.model_tensors())?;
    Ok(model)
}

pub fn load_diffusion(ck: &Checkpoint, latent_shape: (usize, usize, usize), cond_dim: usize) -> Result<DiffusionModel> {
    let mut model = DiffusionModel::new(ck.config()?, latent_shape, cond_dim, DTYPE)?;
    model.load_tensors(&ck.model_tensors())?;
    Ok(model)
}

pub fn load_extractor(ck: &Checkpoint) -> Result<FamilyClassifier> {
    #[derive(serde::Deserialize)]
    struct Saved {
        stft: StftConfig,
        extractor: crate::metrics::ClassifierConfig,
    }
    let saved: Saved = ck.config()?;
    let classes: Vec<String> = ck.extra("classes")?;
    let model = FamilyClassifier::new(Arc::new(saved.stft), classes, &saved.extractor)?;
    model.load_tensors(&ck.model_tensors())?;
    Ok(model)
}

/// Takes the codec sections from the VQ-GAN checkpoint so downstream stages
/// always see the grid the autoencoder was trained on.
pub fn adopt_vqgan_config(cfg: &mut RunConfig, ck: &Checkpoint) -> Result<()> {
    #[derive(serde::Deserialize)]
    struct Saved {
        stft: StftConfig,
        vqgan: VqGanConfig,
    }
    let saved: Saved = ck.config()?;
    if saved.stft != cfg.stft || saved.vqgan != cfg.vqgan {
        tracing::warn!("run config differs from the vqgan checkpoint; using the checkpoint's codec settings");
    }
    cfg.stft = saved.stft;
    cfg.vqgan = saved.vqgan;
    Ok(())
}

fn encode_all(vqgan: &VqGan, spectra: &[SpectralImage]) -> Result<Vec<LatentCode>> {
    let mut out = Vec::with_capacity(spectra.len());
    for chunk in spectra.chunks(16) {
        out.extend(vqgan.encode_quantized(chunk)?);
    }
    Ok(out)
}

/// Every description the augmenter produces for the records under a range
/// of seeds; the tokenizer vocabulary is built from these.
fn description_corpus(records: &[NoteRecord], augmenter: &dyn Augmenter) -> Result<Vec<String>> {
    let mut texts = BTreeSet::new();
    for r in records {
        for style in DescriptionStyle::ALL {
            for seed in 0..64 {
                texts.insert(augmenter.describe(r, style, seed)?.text);
            }
        }
    }
    Ok(texts.into_iter().collect())
}

fn train_embedding(cfg: &RunConfig, ck: &CheckpointDir, opts: &TrainOptions) -> Result<TrainReport> {
    let schedule = cfg.train.embedding;
    let vq_ck = ck.load(Stage::Vqgan)?;
    let mut cfg = cfg.clone();
    adopt_vqgan_config(&mut cfg, &vq_ck)?;
    let (vqgan, _) = load_vqgan(&vq_ck)?;
    let upstream: BTreeMap<String, String> = [("vqgan".to_string(), vq_ck.sha256.clone())].into_iter().collect();
    let config = serde_json::to_value(&cfg.embedding)?;
    let resume = resume_point(ck, Stage::Embedding, &config, &upstream, opts)?;

    let set = TrainingSet::load(&cfg)?;
    let latents = encode_all(&vqgan, &set.spectra(&stft_of(&cfg), cfg.vqgan.r)?)?;
    let latent_shape = latents[0].shape();
    let augmenter = cfg.data.augment.augmenter()?;
    let vocab = match &resume {
        Some(existing) => Vocabulary::parse(&existing.extra::<String>("vocab")?)?,
        None => Vocabulary::build(description_corpus(&set.records, &augmenter)?.iter().map(String::as_str)),
    };
    let mut trainer = EmbeddingTrainer::new(EmbeddingModel::new(cfg.embedding.clone(), vocab, latent_shape, DTYPE)?)?;
    if let Some(existing) = &resume {
        trainer.model.params.load(&existing.model_tensors())?;
        trainer.load_optimizer_state(&existing.tensors, existing.meta.step)?;
    }
    let start = trainer.step;
    if start >= schedule.steps && resume.is_some() {
        return Ok(report(Stage::Embedding, ck, start, start, stage_sha(ck, Stage::Embedding)?, None));
    }
    let mut log = LossLog::open(&ck.loss_path(Stage::Embedding), "step,loss,temperature", start)?;
    let save = |t: &EmbeddingTrainer| -> Result<String> {
        let mut tensors = t.model.params.tensors();
        tensors.extend(t.optimizer_state());
        let (c, h, w) = latent_shape;
        let meta = CheckpointMeta {
            stage: Stage::Embedding,
            step: t.step,
            config: config.clone(),
            extra: [
                ("vocab".to_string(), json!(t.model.vocab.to_text())),
                ("latent_shape".to_string(), json!([c, h, w])),
            ]
            .into_iter()
            .collect(),
            upstream: upstream.clone(),
        };
        checkpoint::save(&ck.path(Stage::Embedding), &tensors, &meta)
    };
    let batch_seed = mix_seed(cfg.embedding.seed, 0xBA7C);
    let mut last = None;
    while trainer.step < schedule.steps {
        let step = trainer.step;
        let idx = batch_indices(latents.len(), schedule.batch_size, batch_seed, step);
        let batch: Vec<LatentCode> = idx.iter().map(|&i| latents[i].clone()).collect();
        let records: Vec<NoteRecord> = idx.iter().map(|&i| set.records[i].clone()).collect();
        let texts = trainer.sample_descriptions(&records, &cfg.data.augment, &augmenter)?;
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let loss = trainer.train_step(&LatentCode::stack(&batch, DTYPE)?, &refs)?;
        log.append(step, &[loss, trainer.model.temperature()?])?;
        last = Some(loss);
        if schedule.save_every > 0 && trainer.step % schedule.save_every == 0 && trainer.step < schedule.steps {
            save(&trainer)?;
        }
    }
    let sha = save(&trainer)?;
    Ok(report(Stage::Embedding, ck, start, trainer.step, sha, last))
}

fn stage_sha(ck: &CheckpointDir, stage: Stage) -> Result<String> {
    checkpoint::file_sha256(&ck.path(stage))
}

fn train_diffusion(cfg: &RunConfig, ck: &CheckpointDir, opts: &TrainOptions) -> Result<TrainReport> {
    let schedule = cfg.train.diffusion;
    let vq_ck = ck.load(Stage::Vqgan)?;
    let emb_ck = ck.load(Stage::Embedding)?;
    let mut cfg = cfg.clone();
    adopt_vqgan_config(&mut cfg, &vq_ck)?;
    let (vqgan, _) = load_vqgan(&vq_ck)?;
    let set = TrainingSet::load(&cfg)?;
    let latents = encode_all(&vqgan, &set.spectra(&stft_of(&cfg), cfg.vqgan.r)?)?;
    let latent_shape = latents[0].shape();
    let embedding = load_embedding(&emb_ck, latent_shape)?;
    cfg.embedding = emb_ck.config()?;
    let upstream: BTreeMap<String, String> = [
        ("vqgan".to_string(), vq_ck.sha256.clone()),
        ("embedding".to_string(), emb_ck.sha256.clone()),
    ]
    .into_iter()
    .collect();
    let config = serde_json::to_value(&cfg.diffusion)?;
    let resume = resume_point(ck, Stage::Diffusion, &config, &upstream, opts)?;

    let mut model = DiffusionModel::new(cfg.diffusion.clone(), latent_shape, cfg.embedding.dim, DTYPE)?;
    model.latent_scale = latent_scale_for(&latents);
    let mut trainer = DiffusionTrainer::new(model)?;
    if let Some(existing) = &resume {
        trainer.model.load_tensors(&existing.model_tensors())?;
        trainer.load_optimizer_state(&existing.tensors, existing.meta.step)?;
    }
    let start = trainer.step;
    if start >= schedule.steps && resume.is_some() {
        return Ok(report(Stage::Diffusion, ck, start, start, stage_sha(ck, Stage::Diffusion)?, None));
    }
    let augmenter = cfg.data.augment.augmenter()?;
    let null = embedding.null_embedding()?;
    let mut log = LossLog::open(&ck.loss_path(Stage::Diffusion), "step,loss", start)?;
    let save = |t: &DiffusionTrainer| -> Result<String> {
        let mut tensors = t.model.tensors();
        tensors.extend(t.optimizer_state());
        let (c, h, w) = latent_shape;
        let meta = CheckpointMeta {
            stage: Stage::Diffusion,
            step: t.step,
            config: config.clone(),
            extra: [
                ("latent_shape".to_string(), json!([c, h, w])),
                ("cond_dim".to_string(), json!(t.model.cond_dim())),
            ]
            .into_iter()
            .collect(),
            upstream: upstream.clone(),
        };
        checkpoint::save(&ck.path(Stage::Diffusion), &tensors, &meta)
    };
    let batch_seed = mix_seed(cfg.diffusion.seed, 0xBA7C);
    let text_seed = mix_seed(cfg.diffusion.seed, 0x7E47);
    let mut last = None;
    while trainer.step < schedule.steps {
        let step = trainer.step;
        let idx = batch_indices(latents.len(), schedule.batch_size, batch_seed, step);
        let batch: Vec<LatentCode> = idx.iter().map(|&i| latents[i].clone()).collect();
        let texts = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let seed = mix_seed(mix_seed(text_seed, step as u64), k as u64);
                let style = cfg.data.augment.sample_style(&mut ChaCha8Rng::seed_from_u64(seed));
                Ok(augmenter.describe(&set.records[i], style, seed)?.text)
            })
            .collect::<Result<Vec<String>>>()?;
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let cond = embedding.text_tensor(&refs)?.detach();
        let nulls = embedding_rows(&vec![&null; idx.len()], DTYPE)?;
        let loss = trainer.train_step(&LatentCode::stack(&batch, DTYPE)?, &cond, &nulls)?;
        log.append(step, &[loss])?;
        last = Some(loss);
        if schedule.save_every > 0 && trainer.step % schedule.save_every == 0 && trainer.step < schedule.steps {
            save(&trainer)?;
        }
    }
    let sha = save(&trainer)?;
    Ok(report(Stage::Diffusion, ck, start, trainer.step, sha, last))
}

fn train_extractor(cfg: &RunConfig, ck: &CheckpointDir) -> Result<TrainReport> {
    let set = TrainingSet::load(cfg)?;
    let classes: Vec<String> = set
        .records
        .iter()
        .map(|r| r.instrument_family.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let labels: Vec<usize> = set
        .records
        .iter()
        .map(|r| classes.iter().position(|c| *c == r.instrument_family).unwrap_or(0))
        .collect();
    let mut model = FamilyClassifier::new(stft_of(cfg), classes.clone(), &cfg.extractor)?;
    let losses = model.train(&set.clips, &labels, &cfg.extractor)?;
    let mut log = LossLog::open(&ck.loss_path(Stage::Extractor), "step,loss", 0)?;
    for (i, l) in losses.iter().enumerate() {
        log.append(i, &[*l])?;
    }
    let meta = CheckpointMeta {
        stage: Stage::Extractor,
        step: losses.len(),
        config: json!({ "stft": cfg.stft, "extractor": cfg.extractor }),
        extra: [("classes".to_string(), json!(classes))].into_iter().collect(),
        upstream: BTreeMap::new(),
    };
    let sha = checkpoint::save(&ck.path(Stage::Extractor), &model.tensors(), &meta)?;
    Ok(report(Stage::Extractor, ck, 0, losses.len(), sha, losses.last().copied()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_deterministic_and_distinct() {
        let a = batch_indices(8, 4, 11, 3);
        assert_eq!(a, batch_indices(8, 4, 11, 3));
        assert_eq!(a.len(), 4);
        assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), 4);
        assert_ne!(a, batch_indices(8, 4, 11, 4));
        let mut all = batch_indices(5, 9, 0, 0);
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn loss_log_keeps_rows_before_resume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        let mut log = LossLog::open(&p, "step,loss", 0).unwrap();
        for s in 0..5 {
            log.append(s, &[s as f64 * 0.5]).unwrap();
        }
        drop(log);
        let mut log = LossLog::open(&p, "step,loss", 3).unwrap();
        log.append(3, &[9.0]).unwrap();
        drop(log);
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "step,loss\n0,0\n1,0.5\n2,1\n3,9\n");
    }
}
