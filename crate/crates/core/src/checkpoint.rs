//! Safetensors checkpoints with a JSON metadata record, written atomically.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Metadata key holding the serialized [`CheckpointMeta`]. A single key keeps
/// the safetensors header byte-stable across runs.
const META_KEY: &str = "timbre";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Vqgan,
    Embedding,
    Diffusion,
    Extractor,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Vqgan, Stage::Embedding, Stage::Diffusion, Stage::Extractor];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Vqgan => "vqgan",
            Stage::Embedding => "embedding",
            Stage::Diffusion => "diffusion",
            Stage::Extractor => "extractor",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}; expected vqgan, embedding, diffusion or extractor")))
    }

    /// Stages whose checkpoints must exist before this one can train.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Vqgan | Stage::Extractor => &[],
            Stage::Embedding => &[Stage::Vqgan],
            Stage::Diffusion => &[Stage::Vqgan, Stage::Embedding],
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.safetensors", self.name())
    }

    pub fn loss_file_name(self) -> String {
        format!("{}_loss.csv", self.name())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Stage model configuration as JSON.
    pub config: serde_json::Value,
    /// Extra stage-specific fields (vocabulary, class names, shapes...).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
    /// SHA-256 of the upstream checkpoints this one was trained against.
    #[serde(default)]
    pub upstream: BTreeMap<String, String>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
    pub sha256: String,
}

impl Checkpoint {
    /// Tensors without the optimizer state (`opt.` prefix).
    pub fn model_tensors(&self) -> HashMap<String, Tensor> {
        self.tensors.iter().filter(|(k, _)| !k.starts_with("opt.")).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn has_optimizer_state(&self) -> bool {
        self.tensors.keys().any(|k| k.starts_with("opt."))
    }

    pub fn extra<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .extra
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("{} checkpoint lacks {key:?}", self.meta.stage)))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("{} checkpoint field {key:?}: {e}", self.meta.stage)))
    }

    pub fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.meta.config.clone())
            .map_err(|e| Error::Checkpoint(format!("{} checkpoint config: {e}", self.meta.stage)))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Serializes to a sibling temp file and renames it into place, so readers
/// never observe a partial checkpoint. Returns the file's SHA-256.
pub fn save(path: &Path, tensors: &HashMap<String, Tensor>, meta: &CheckpointMeta) -> Result<String> {
    let info: HashMap<String, String> = [(META_KEY.to_string(), serde_json::to_string(meta)?)].into_iter().collect();
    let tensors: Vec<(String, Tensor)> = tensors
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.contiguous()?)))
        .collect::<Result<_>>()?;
    let bytes = safetensors::serialize(tensors, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let tmp: PathBuf = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let text = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing checkpoint metadata", path.display())))?;
    let meta: CheckpointMeta =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("{}: metadata: {e}", path.display())))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(Checkpoint { meta, tensors, sha256: sha256_hex(&bytes) })
}

/// Checkpoints of one run, laid out as `<root>/<stage>.safetensors`.
#[derive(Debug, Clone)]
pub struct CheckpointDir {
    pub root: PathBuf,
}

impl CheckpointDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.file_name())
    }

    pub fn loss_path(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.loss_file_name())
    }

    pub fn exists(&self, stage: Stage) -> bool {
        self.path(stage).is_file()
    }

    /// Loads a stage checkpoint; absence is a dependency error naming the stage.
    pub fn load(&self, stage: Stage) -> Result<Checkpoint> {
        let path = self.path(stage);
        if !path.is_file() {
            return Err(Error::Dependency(format!(
                "missing {stage} checkpoint at {} (run `train --stage {stage}` first)",
                path.display()
            )));
        }
        let ck = load(&path)?;
        if ck.meta.stage != stage {
            return Err(Error::Checkpoint(format!("{} holds a {} checkpoint, expected {stage}", path.display(), ck.meta.stage)));
        }
        Ok(ck)
    }

    /// Errors with the first missing upstream stage of `stage`.
    pub fn require_upstream(&self, stage: Stage) -> Result<()> {
        for up in stage.upstream() {
            if !self.exists(*up) {
                return Err(Error::Dependency(format!(
                    "stage {stage} needs the {up} checkpoint, not found at {} (run `train --stage {up}` first)",
                    self.path(*up).display()
                )));
            }
        }
        Ok(())
    }

    pub fn hashes(&self, stages: &[Stage]) -> Result<BTreeMap<String, String>> {
        stages.iter().map(|s| Ok((s.name().to_string(), file_sha256(&self.path(*s))?))).collect()
    }
}
