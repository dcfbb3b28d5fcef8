//! One run configuration for every stage, read from a TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::diffusion::DiffusionConfig;
use crate::embedding::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::manipulate::{ExtendConfig, RepaintConfig};
use crate::metrics::{ClassifierConfig, EvalConfig};
use crate::spectral::StftConfig;
use crate::vqgan::VqGanConfig;

/// Overrides `checkpoint_dir` when set.
pub const CHECKPOINT_ENV: &str = "TIMBRE_CHECKPOINTS";

/// File name used when a run records the configuration it actually used.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// JSON-lines note manifest used by every training stage.
    pub manifest: Option<PathBuf>,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { manifest: None, augment: AugmentConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSchedule {
    pub steps: usize,
    pub batch_size: usize,
    /// Write an intermediate checkpoint every this many steps; 0 only at the end.
    pub save_every: usize,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 8, save_every: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub vqgan: StageSchedule,
    pub embedding: StageSchedule,
    pub diffusion: StageSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            vqgan: StageSchedule::default(),
            embedding: StageSchedule::default(),
            diffusion: StageSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub bind: String,
    /// Upper bound on respaced sampling steps a request may ask for.
    pub max_steps: usize,
    pub max_in_flight: usize,
    /// Origin allowed by CORS; `"*"` allows any.
    pub cors_origin: String,
    /// Audio larger than this is served through a temporary URL instead of inline.
    pub inline_limit: usize,
    pub temp_ttl_secs: u64,
    pub max_upload_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            max_steps: 50,
            max_in_flight: 2,
            cors_origin: "http://localhost:5173".into(),
            inline_limit: 1 << 20,
            temp_ttl_secs: 600,
            max_upload_bytes: 16 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Default seed for generation and manipulation commands.
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub stft: StftConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub vqgan: VqGanConfig,
    pub embedding: EmbeddingConfig,
    pub diffusion: DiffusionConfig,
    pub extractor: ClassifierConfig,
    pub repaint: RepaintConfig,
    pub extend: ExtendConfig,
    pub eval: EvalConfig,
    pub service: ServiceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            stft: StftConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            vqgan: VqGanConfig::default(),
            embedding: EmbeddingConfig::default(),
            diffusion: DiffusionConfig::default(),
            extractor: ClassifierConfig::default(),
            repaint: RepaintConfig::default(),
            extend: ExtendConfig::default(),
            eval: EvalConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a TOML document. Relative paths stay as written.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults), resolves relative paths against the
    /// file's directory and applies the checkpoint-root environment override.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                let mut cfg = Self::parse(&text).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                    other => other,
                })?;
                cfg.resolve_paths(p.parent().unwrap_or(Path::new(".")));
                cfg
            }
            None => Self::default(),
        };
        if let Some(dir) = std::env::var_os(CHECKPOINT_ENV).filter(|v| !v.is_empty()) {
            cfg.checkpoint_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.checkpoint_dir);
        if let Some(m) = self.data.manifest.as_mut() {
            fix(m);
        }
        if let Some(t) = self.data.augment.templates.as_mut() {
            fix(t);
        }
        if let Some(q) = self.data.augment.qualities.as_mut() {
            fix(q);
        }
        if let Some(e) = self.embedding.external_text_embeddings.as_mut() {
            fix(e);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.data.augment.validate()?;
        self.vqgan.validate()?;
        self.embedding.validate()?;
        self.diffusion.validate()?;
        self.repaint.validate()?;
        self.extend.split(8).map(|_| ())?;
        for (name, s) in [("vqgan", &self.train.vqgan), ("embedding", &self.train.embedding), ("diffusion", &self.train.diffusion)] {
            if s.batch_size == 0 {
                return Err(Error::Config(format!("train.{name}.batch_size must be at least 1")));
            }
        }
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be at least 1".into()));
        }
        if self.service.max_steps == 0 || self.service.max_in_flight == 0 {
            return Err(Error::Config("service.max_steps and service.max_in_flight must be at least 1".into()));
        }
        let (_, h, w) = self.latent_shape();
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!(
                "latent grid {h}x{w} must be non-empty with even sides; adjust stft or vqgan.r"
            )));
        }
        Ok(())
    }

    /// Spectral image size after cropping/padding to multiples of `r`.
    pub fn model_grid(&self) -> (usize, usize) {
        let r = self.vqgan.r;
        ((self.stft.num_bins() / r).max(1) * r, self.stft.num_frames().div_ceil(r) * r)
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.model_grid();
        (self.vqgan.latent_channels, h / self.vqgan.r, w / self.vqgan.r)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(matches!(RunConfig::parse("sede = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[vqgan]\nrr = 4"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[diffusion.optimizer]\nlearning_rate = 1.0"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[train.vqgan]\nepochs = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn partial_documents_fill_defaults_and_validate() {
        let cfg = RunConfig::parse("seed = 9\n[stft]\nsample_rate = 8000\n[train.diffusion]\nsteps = 3\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.stft.sample_rate, 8000);
        assert_eq!(cfg.train.diffusion.steps, 3);
        assert_eq!(cfg.train.diffusion.batch_size, 8);
        assert!(RunConfig::parse("[stft]\nhop_size = 300").is_err());
        assert!(RunConfig::parse("[vqgan]\nr = 3").is_err());
    }

    #[test]
    fn default_grid_is_even() {
        let cfg = RunConfig::default();
        // 513 bins × 251 frames → 512 × 256 at r = 8.
        assert_eq!(cfg.model_grid(), (512, 256));
        assert_eq!(cfg.latent_shape(), (4, 64, 32));
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "checkpoint_dir = \"ck\"\n[data]\nmanifest = \"notes/manifest.jsonl\"\n").unwrap();
        let cfg = RunConfig::load(Some(&path)).unwrap();
        if std::env::var_os(CHECKPOINT_ENV).is_none() {
            assert_eq!(cfg.checkpoint_dir, dir.path().join("ck"));
        }
        assert_eq!(cfg.data.manifest.unwrap(), dir.path().join("notes/manifest.jsonl"));
        let written = cfg_dir_written(&dir);
        assert!(RunConfig::parse(&std::fs::read_to_string(written).unwrap()).is_ok());
    }

    fn cfg_dir_written(dir: &tempfile::TempDir) -> PathBuf {
        RunConfig::default().write_resolved(&dir.path().join("out")).unwrap()
    }
}
