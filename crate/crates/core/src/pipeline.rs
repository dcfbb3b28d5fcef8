//! Inference over trained checkpoints: generation and the three manipulation
//! commands, with JSON sidecars that are enough to replay a job.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::checkpoint::{sha256_hex, CheckpointDir, Stage};
use crate::config::RunConfig;
use crate::data::MAX_DESCRIPTION_CHARS;
use crate::diffusion::DiffusionModel;
use crate::embedding::{Embedding, EmbeddingModel};
use crate::error::{Error, Result};
use crate::manipulate::{extend_length, repaint, spectral_mask_to_latent, transform, InpaintMask, RepaintConfig};
use crate::spectral::{istft_plus_len, spectral_png_bytes, stft_plus, SpectralImage, StftConfig};
use crate::train::{adopt_vqgan_config, load_diffusion, load_embedding, load_vqgan};
use crate::vqgan::{quantize, Codebook, LatentCode, VqGan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Generate,
    Transform,
    Inpaint,
    Extend,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Transform => "transform",
            Command::Inpaint => "inpaint",
            Command::Extend => "extend",
        }
    }

    pub fn needs_input(self) -> bool {
        self != Command::Generate
    }
}

/// Everything that determines a job's output besides the checkpoints and the
/// resolved configuration. Serialized into sidecars and service responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobParams {
    pub command: Command,
    pub prompt: String,
    pub w: f64,
    pub seed: u64,
    /// Respaced sampling steps actually used.
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<usize>,
    /// Keep/regenerate mask at spectrogram resolution, run-length encoded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_frames: Option<usize>,
    /// SHA-256 of the input WAV bytes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_sha256: Option<String>,
    /// Where the input came from, when it was a file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_path: Option<PathBuf>,
}

impl JobParams {
    pub fn new(command: Command, prompt: impl Into<String>, w: f64, seed: u64, steps: usize) -> Self {
        Self {
            command,
            prompt: prompt.into(),
            w,
            seed,
            steps,
            t0: None,
            mask: None,
            target_frames: None,
            input_sha256: None,
            input_path: None,
        }
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.prompt.chars().count() > MAX_DESCRIPTION_CHARS {
            return Err(Error::InvalidInput(format!("prompt longer than {MAX_DESCRIPTION_CHARS} characters")));
        }
        if !(self.w.is_finite() && self.w >= 0.0) {
            return Err(Error::InvalidInput(format!("guidance scale must be finite and >= 0, got {}", self.w)));
        }
        if self.steps == 0 || self.steps > timesteps {
            return Err(Error::InvalidInput(format!("steps must lie in 1..={timesteps}, got {}", self.steps)));
        }
        let missing = |what: &str| Error::InvalidInput(format!("{} needs {what}", self.command.name()));
        match self.command {
            Command::Generate => {}
            Command::Transform => {
                let t0 = self.t0.ok_or_else(|| missing("t0"))?;
                if t0 > timesteps {
                    return Err(Error::InvalidInput(format!("t0 = {t0} exceeds T = {timesteps}")));
                }
            }
            Command::Inpaint => {
                self.mask.as_ref().ok_or_else(|| missing("a mask"))?;
            }
            Command::Extend => {
                if self.target_frames.ok_or_else(|| missing("target_frames"))? == 0 {
                    return Err(Error::InvalidInput("target_frames must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Result of one job: audio, its spectrogram at codec resolution and the
/// latent it was decoded from.
#[derive(Debug, Clone)]
pub struct JobOutput {
    pub audio: AudioClip,
    pub spectral: SpectralImage,
    pub latent: LatentCode,
    /// Extension requests are rounded up to whole latent columns.
    pub rounded_frames: Option<usize>,
}

/// The three trained models plus the configuration they imply.
pub struct Models {
    /// Run configuration with codec, embedding and diffusion sections taken
    /// from the checkpoints.
    pub config: RunConfig,
    pub stft: Arc<StftConfig>,
    pub vqgan: VqGan,
    pub embedding: EmbeddingModel,
    pub diffusion: DiffusionModel,
    /// SHA-256 per stage.
    pub checkpoints: BTreeMap<String, String>,
    codebook: Codebook,
}

impl Models {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let dir = CheckpointDir::new(&cfg.checkpoint_dir);
        let vq_ck = dir.load(Stage::Vqgan)?;
        let emb_ck = dir.load(Stage::Embedding)?;
        let diff_ck = dir.load(Stage::Diffusion)?;
        let mut config = cfg.clone();
        adopt_vqgan_config(&mut config, &vq_ck)?;
        config.embedding = emb_ck.config()?;
        config.diffusion = diff_ck.config()?;
        // Sampling knobs stay under the run's control.
        config.diffusion.sample_steps = cfg.diffusion.sample_steps;
        config.diffusion.guidance_scale = cfg.diffusion.guidance_scale;
        config.diffusion.quantize_samples = cfg.diffusion.quantize_samples;

        if emb_ck.meta.upstream.get("vqgan") != Some(&vq_ck.sha256) {
            tracing::warn!("embedding checkpoint was trained against a different vqgan");
        }
        if diff_ck.meta.upstream.get("embedding") != Some(&emb_ck.sha256) {
            tracing::warn!("diffusion checkpoint was trained against a different embedding");
        }
        let (vqgan, stft) = load_vqgan(&vq_ck)?;
        let latent_shape = config.latent_shape();
        let embedding = load_embedding(&emb_ck, latent_shape)?;
        let mut diffusion = load_diffusion(&diff_ck, latent_shape, embedding.config.dim)?;
        diffusion.config.sample_steps = config.diffusion.sample_steps;
        diffusion.config.guidance_scale = config.diffusion.guidance_scale;
        diffusion.config.quantize_samples = config.diffusion.quantize_samples;
        config.validate()?;
        let checkpoints = [
            ("vqgan".to_string(), vq_ck.sha256),
            ("embedding".to_string(), emb_ck.sha256),
            ("diffusion".to_string(), diff_ck.sha256),
        ]
        .into_iter()
        .collect();
        let codebook = vqgan.codebook()?;
        Ok(Self { config, stft: Arc::new(stft), vqgan, embedding, diffusion, checkpoints, codebook })
    }

    pub fn timesteps(&self) -> usize {
        self.diffusion.schedule.len()
    }

    pub fn default_steps(&self) -> usize {
        self.diffusion.config.sample_steps.unwrap_or(self.timesteps()).min(self.timesteps())
    }

    /// Condition and null embeddings; the empty prompt conditions on the null
    /// embedding itself, i.e. samples unconditionally.
    pub fn condition(&self, prompt: &str) -> Result<(Embedding, Embedding)> {
        let null = self.embedding.null_embedding()?;
        let cond = if prompt.trim().is_empty() { null.clone() } else { self.embedding.encode_text(prompt)? };
        Ok((cond, null))
    }

    /// Checks the sample rate and length of an input note and brings it to
    /// the configured duration, peak-normalized like the training data.
    pub fn prepare_input(&self, clip: &AudioClip) -> Result<AudioClip> {
        if clip.sample_rate != self.stft.sample_rate {
            return Err(Error::InvalidInput(format!(
                "input sample rate {} Hz, expected {} Hz",
                clip.sample_rate, self.stft.sample_rate
            )));
        }
        let n = self.stft.num_samples();
        if clip.len() > n {
            return Err(Error::InvalidInput(format!(
                "input has {} samples, more than the configured {n} ({} s)",
                clip.len(),
                self.stft.duration
            )));
        }
        clip.check_finite()?;
        Ok(clip.peak_normalized().fit_length(n))
    }

    /// Model-grid spectral image and quantized latent of a prepared clip.
    pub fn encode(&self, clip: &AudioClip) -> Result<(SpectralImage, LatentCode)> {
        let x = stft_plus(clip, &self.stft)?.to_model_grid(self.vqgan.config.r);
        let z = self.vqgan.encode_quantized(std::slice::from_ref(&x))?.remove(0);
        Ok((x, z))
    }

    /// Decodes a latent to `frames` spectral frames and `num_samples` samples.
    pub fn render(&self, z: &LatentCode, frames: usize, num_samples: usize) -> Result<JobOutput> {
        let z = if self.diffusion.config.quantize_samples && !z.quantized {
            quantize(z, &self.codebook)?.latent
        } else {
            z.clone()
        };
        let spectral = self.vqgan.decode(&z)?.resized(self.stft.num_bins(), frames);
        let audio = istft_plus_len(&spectral, &self.stft, num_samples)?;
        Ok(JobOutput { audio, spectral, latent: z, rounded_frames: None })
    }

    fn render_default(&self, z: &LatentCode) -> Result<JobOutput> {
        self.render(z, self.stft.num_frames(), self.stft.num_samples())
    }

    /// Decode∘encode of an input note: what every edit returns when it edits nothing.
    pub fn round_trip(&self, clip: &AudioClip) -> Result<JobOutput> {
        let (_, z) = self.encode(&self.prepare_input(clip)?)?;
        self.render_default(&z)
    }

    /// Converts a spectrogram-resolution mask (codec bins × frames) to the
    /// latent grid. Cropped bins are ignored; padded frames count as known.
    pub fn latent_mask(&self, mask: &InpaintMask) -> Result<InpaintMask> {
        let (bins, frames) = (self.stft.num_bins(), self.stft.num_frames());
        if (mask.height, mask.width) != (bins, frames) {
            return Err(Error::InvalidInput(format!(
                "mask is {}x{} but the spectrogram is {bins}x{frames} (bins x frames)",
                mask.height, mask.width
            )));
        }
        let (gh, gw) = self.config.model_grid();
        let mut grid = InpaintMask::filled(gh, gw, true);
        for y in 0..gh.min(bins) {
            for x in 0..gw.min(frames) {
                grid.set(y, x, mask.get(y, x));
            }
        }
        spectral_mask_to_latent(&grid, self.vqgan.config.r)
    }

    pub fn run(&self, params: &JobParams, input: Option<&AudioClip>) -> Result<JobOutput> {
        params.validate(self.timesteps())?;
        let (cond, null) = self.condition(&params.prompt)?;
        let steps = Some(params.steps);
        if params.command == Command::Generate {
            let z = self.diffusion.sample(&[&cond], &null, params.w, &[params.seed], steps)?.remove(0);
            return self.render_default(&z);
        }
        let input = input.ok_or_else(|| Error::InvalidInput(format!("{} needs an input note", params.command.name())))?;
        let (x, z) = self.encode(&self.prepare_input(input)?)?;
        match params.command {
            Command::Generate => unreachable!(),
            Command::Transform => {
                let t0 = params.t0.unwrap_or(0);
                let out = transform(&self.diffusion, &z, t0, &cond, &null, params.w, steps, params.seed)?;
                self.render_default(&out)
            }
            Command::Inpaint => {
                let mask = InpaintMask::from_rle_json(params.mask.as_deref().unwrap_or_default())?;
                let latent_mask = self.latent_mask(&mask)?;
                let cfg = RepaintConfig { w: params.w, seed: params.seed, steps, ..self.config.repaint.clone() };
                let out = repaint(&self.diffusion, &z, &latent_mask, &cond, &null, &cfg)?;
                self.render_default(&out)
            }
            Command::Extend => {
                let target = params.target_frames.unwrap_or(self.stft.num_frames());
                let cfg = RepaintConfig { w: params.w, seed: params.seed, steps, ..self.config.repaint.clone() };
                let ext = extend_length(&self.vqgan, &self.diffusion, &x, target, &cond, &null, &cfg, &self.config.extend)?;
                let num_samples = if target == self.stft.num_frames() {
                    self.stft.num_samples()
                } else {
                    (target - 1) * self.stft.hop_size
                };
                let mut out = self.render(&ext.latent, target, num_samples)?;
                out.rounded_frames = ext.rounded().then_some(ext.frames);
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioInfo {
    pub file: String,
    pub sample_rate: u32,
    pub samples: usize,
    pub sha256: String,
}

/// Written next to every output WAV; replaying it regenerates the WAV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub params: JobParams,
    pub checkpoints: BTreeMap<String, String>,
    pub config: RunConfig,
    pub audio: AudioInfo,
    pub spectrogram: String,
}

impl Sidecar {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Paths of one job's artifacts, derived from the WAV path.
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub wav: PathBuf,
    pub png: PathBuf,
    pub json: PathBuf,
    pub config: PathBuf,
}

impl OutputPaths {
    pub fn for_wav(wav: &Path) -> Self {
        let wav = if wav.extension().is_some() { wav.to_path_buf() } else { wav.with_extension("wav") };
        let dir = wav.parent().map(Path::to_path_buf).unwrap_or_default();
        Self {
            png: wav.with_extension("png"),
            json: wav.with_extension("json"),
            config: dir.join(crate::config::RESOLVED_CONFIG),
            wav,
        }
    }
}

/// Writes WAV, spectrogram PNG, sidecar JSON and the resolved config.
pub fn write_outputs(models: &Models, params: &JobParams, out: &JobOutput, wav_path: &Path) -> Result<(OutputPaths, Sidecar)> {
    let paths = OutputPaths::for_wav(wav_path);
    if let Some(dir) = paths.wav.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let wav = out.audio.to_wav_bytes()?;
    std::fs::write(&paths.wav, &wav)?;
    std::fs::write(&paths.png, spectral_png_bytes(&out.spectral)?)?;
    let file_name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let sidecar = Sidecar {
        params: params.clone(),
        checkpoints: models.checkpoints.clone(),
        config: models.config.clone(),
        audio: AudioInfo {
            file: file_name(&paths.wav),
            sample_rate: out.audio.sample_rate,
            samples: out.audio.len(),
            sha256: sha256_hex(&wav),
        },
        spectrogram: file_name(&paths.png),
    };
    std::fs::write(&paths.json, serde_json::to_string_pretty(&sidecar)?)?;
    std::fs::write(&paths.config, models.config.to_toml()?)?;
    Ok((paths, sidecar))
}

/// Reads an input WAV and records its hash and path in `params`.
pub fn attach_input(params: &mut JobParams, path: &Path) -> Result<AudioClip> {
    let bytes = std::fs::read(path)?;
    params.input_sha256 = Some(sha256_hex(&bytes));
    params.input_path = Some(path.to_path_buf());
    AudioClip::from_wav_bytes(&bytes)
}

/// Re-runs the job described by a sidecar against the checkpoints in
/// `checkpoint_dir`, refusing if their hashes differ from the recorded ones.
/// `input` overrides the recorded input path; its hash must still match.
pub fn replay(sidecar: &Sidecar, checkpoint_dir: &Path, input: Option<&Path>) -> Result<(Models, JobOutput)> {
    let mut cfg = sidecar.config.clone();
    cfg.checkpoint_dir = checkpoint_dir.to_path_buf();
    let models = Models::load(&cfg)?;
    if models.checkpoints != sidecar.checkpoints {
        return Err(Error::Dependency(format!(
            "checkpoints in {} differ from the ones recorded in the sidecar",
            checkpoint_dir.display()
        )));
    }
    let clip = if sidecar.params.command.needs_input() {
        let path = input
            .map(Path::to_path_buf)
            .or_else(|| sidecar.params.input_path.clone())
            .ok_or_else(|| Error::InvalidInput("sidecar has no input path; pass one explicitly".into()))?;
        let bytes = std::fs::read(&path)?;
        if let Some(expected) = &sidecar.params.input_sha256 {
            if &sha256_hex(&bytes) != expected {
                return Err(Error::InvalidInput(format!("{} does not match the recorded input hash", path.display())));
            }
        }
        Some(AudioClip::from_wav_bytes(&bytes)?)
    } else {
        None
    };
    let out = models.run(&sidecar.params, clip.as_ref())?;
    Ok((models, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_validation() {
        let p = JobParams::new(Command::Generate, "bright, guitar", 3.0, 1, 10);
        p.validate(100).unwrap();
        assert!(JobParams { w: -1.0, ..p.clone() }.validate(100).is_err());
        assert!(JobParams { w: f64::NAN, ..p.clone() }.validate(100).is_err());
        assert!(JobParams { steps: 0, ..p.clone() }.validate(100).is_err());
        assert!(JobParams { steps: 101, ..p.clone() }.validate(100).is_err());
        assert!(JobParams { prompt: "x".repeat(257), ..p.clone() }.validate(100).is_err());

        let t = JobParams { command: Command::Transform, t0: Some(100), ..p.clone() };
        t.validate(100).unwrap();
        assert!(JobParams { t0: Some(101), ..t.clone() }.validate(100).is_err());
        assert!(JobParams { t0: None, ..t }.validate(100).is_err());
        assert!(JobParams { command: Command::Inpaint, ..p.clone() }.validate(100).is_err());
        assert!(JobParams { command: Command::Extend, target_frames: Some(0), ..p }.validate(100).is_err());
    }

    #[test]
    fn params_round_trip_and_reject_unknown_fields() {
        let mut p = JobParams::new(Command::Extend, "", 0.0, 7, 5);
        p.target_frames = Some(40);
        let text = serde_json::to_string(&p).unwrap();
        assert!(!text.contains("t0"));
        assert_eq!(serde_json::from_str::<JobParams>(&text).unwrap(), p);
        assert!(serde_json::from_str::<JobParams>(&text.replace("\"seed\"", "\"sed\"")).is_err());
    }

    #[test]
    fn output_paths_share_a_stem() {
        let p = OutputPaths::for_wav(Path::new("out/note"));
        assert_eq!(p.wav, Path::new("out/note.wav"));
        assert_eq!(p.png, Path::new("out/note.png"));
        assert_eq!(p.json, Path::new("out/note.json"));
        assert_eq!(p.config, Path::new("out/config.resolved.toml"));
    }
}
