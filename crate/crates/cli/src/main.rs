//! `timbre`: train the three stages, generate notes, edit them and score them.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use timbre_core::checkpoint::Stage;
use timbre_core::config::RunConfig;
use timbre_core::manipulate::InpaintMask;
use timbre_core::metrics::{evaluate, FamilyClassifier, FeatureExtractor, SpectralStats};
use timbre_core::pipeline::{attach_input, replay, write_outputs, Command, JobParams, Models, Sidecar};
use timbre_core::train::{load_extractor, train_stage, TrainOptions};
use timbre_core::{checkpoint, data, spectral, AudioClip, Error, Result};

#[derive(Parser)]
#[command(name = "timbre", version, about = "Text-guided musical timbre generation")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true, env = "TIMBRE_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one stage (or all of them in order).
    Train(TrainArgs),
    /// Sample a note from a text prompt.
    Generate(GenArgs),
    /// Re-noise an input note to step T0 and denoise it under a prompt.
    Transform {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        input: PathBuf,
        /// Starting step in [0, T]; 0 returns the codec round trip.
        #[arg(long)]
        t0: usize,
    },
    /// Regenerate the masked part of an input note.
    Inpaint {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        input: PathBuf,
        /// Grayscale PNG over the spectrogram (white = keep) or RLE JSON.
        #[arg(long)]
        mask: PathBuf,
    },
    /// Lengthen or shorten a note, regenerating inserted sustain.
    Extend {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        input: PathBuf,
        /// Desired length in spectrogram frames.
        #[arg(long)]
        target_frames: usize,
    },
    /// Compare a directory of real notes with a directory of generated ones.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a job from its sidecar JSON.
    Replay {
        sidecar: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Input note, when it moved since the original run.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Write the eight synthetic toy notes and their manifest.
    ToyData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a WAV's spectrogram as PNG, optionally with a blank keep-all mask.
    Spectrogram {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mask_template: Option<PathBuf>,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

#[derive(Args)]
struct TrainArgs {
    /// vqgan, embedding, diffusion, extractor or all.
    #[arg(long)]
    stage: String,
    /// Overrides the stage's model seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the stage's step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Start from initialization even if a checkpoint exists.
    #[arg(long)]
    fresh: bool,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "")]
    prompt: String,
    /// Guidance scale w; defaults to diffusion.guidance_scale.
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Respaced sampling steps; defaults to diffusion.sample_steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Output WAV; the PNG and JSON sidecar share its stem.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Cmd::Train(args) => train(&mut cfg, args),
        Cmd::Generate(gen) => job(&cfg, Command::Generate, gen, None, |_| Ok(())),
        Cmd::Transform { gen, input, t0 } => job(&cfg, Command::Transform, gen, Some(&input), |p| {
            p.t0 = Some(t0);
            Ok(())
        }),
        Cmd::Inpaint { gen, input, mask } => {
            let mask = read_mask(&mask)?;
            job(&cfg, Command::Inpaint, gen, Some(&input), |p| {
                p.mask = Some(mask.to_rle_json());
                Ok(())
            })
        }
        Cmd::Extend { gen, input, target_frames } => job(&cfg, Command::Extend, gen, Some(&input), |p| {
            p.target_frames = Some(target_frames);
            Ok(())
        }),
        Cmd::Evaluate { real, gen, out } => eval(&cfg, &real, &gen, out.as_deref()),
        Cmd::Replay { sidecar, out, input } => {
            let sc = Sidecar::load(&sidecar)?;
            let (models, output) = replay(&sc, &cfg.checkpoint_dir, input.as_deref())?;
            let (paths, written) = write_outputs(&models, &sc.params, &output, &out)?;
            let same = written.audio.sha256 == sc.audio.sha256;
            println!("{}", serde_json::json!({ "wav": paths.wav, "sidecar": paths.json, "matches_original": same }));
            Ok(())
        }
        Cmd::ToyData { out } => {
            let manifest = data::toy::write_toy_dataset(&out, &cfg.stft)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Cmd::Spectrogram { input, out, mask_template } => {
            let clip = AudioClip::read_wav(&input)?;
            let stft = std::sync::Arc::new(cfg.stft.clone());
            let x = spectral::stft_plus(&clip.fit_length(cfg.stft.num_samples()), &stft)?;
            std::fs::write(&out, spectral::spectral_png_bytes(&x)?)?;
            if let Some(m) = mask_template {
                std::fs::write(m, InpaintMask::filled(x.height(), x.width(), true).to_png_bytes()?)?;
            }
            Ok(())
        }
        Cmd::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn train(cfg: &mut RunConfig, args: TrainArgs) -> Result<()> {
    let stages: Vec<Stage> = if args.stage == "all" {
        vec![Stage::Vqgan, Stage::Embedding, Stage::Diffusion]
    } else {
        vec![Stage::parse(&args.stage)?]
    };
    let opts = TrainOptions { fresh: args.fresh };
    for stage in stages {
        let mut cfg = cfg.clone();
        if let Some(seed) = args.seed {
            match stage {
                Stage::Vqgan => cfg.vqgan.seed = seed,
                Stage::Embedding => cfg.embedding.seed = seed,
                Stage::Diffusion => cfg.diffusion.seed = seed,
                Stage::Extractor => cfg.extractor.seed = seed,
            }
        }
        if let Some(steps) = args.steps {
            match stage {
                Stage::Vqgan => cfg.train.vqgan.steps = steps,
                Stage::Embedding => cfg.train.embedding.steps = steps,
                Stage::Diffusion => cfg.train.diffusion.steps = steps,
                Stage::Extractor => cfg.extractor.steps = steps,
            }
        }
        cfg.validate()?;
        let started = std::time::Instant::now();
        let report = train_stage(&cfg, stage, &opts)?;
        cfg.write_resolved(&cfg.checkpoint_dir)?;
        println!(
            "{}",
            serde_json::json!({
                "stage": stage.name(),
                "start_step": report.start_step,
                "step": report.step,
                "checkpoint": report.checkpoint,
                "sha256": report.sha256,
                "loss_csv": report.loss_csv,
                "last_loss": report.last_loss,
                "seconds": started.elapsed().as_secs_f64(),
            })
        );
    }
    Ok(())
}

fn job(
    cfg: &RunConfig,
    command: Command,
    gen: GenArgs,
    input: Option<&Path>,
    customize: impl FnOnce(&mut JobParams) -> Result<()>,
) -> Result<()> {
    let models = Models::load(cfg)?;
    let w = gen.guidance.unwrap_or(models.config.diffusion.guidance_scale);
    let seed = gen.seed.unwrap_or(cfg.seed);
    let steps = gen.steps.unwrap_or_else(|| models.default_steps());
    let mut params = JobParams::new(command, gen.prompt, w, seed, steps);
    customize(&mut params)?;
    let clip = input.map(|p| attach_input(&mut params, p)).transpose()?;
    let output = models.run(&params, clip.as_ref())?;
    let (paths, sidecar) = write_outputs(&models, &params, &output, &gen.out)?;
    if let Some(frames) = output.rounded_frames {
        eprintln!("note: latent canvas rounded up to {frames} frames; output trimmed to the request");
    }
    println!(
        "{}",
        serde_json::json!({ "wav": paths.wav, "png": paths.png, "sidecar": paths.json, "sha256": sidecar.audio.sha256 })
    );
    Ok(())
}

fn read_mask(path: &Path) -> Result<InpaintMask> {
    let bytes = std::fs::read(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        InpaintMask::from_rle_json(std::str::from_utf8(&bytes).map_err(|e| Error::InvalidInput(e.to_string()))?)
    } else {
        InpaintMask::from_png_bytes(&bytes)
    }
}

fn eval(cfg: &RunConfig, real: &Path, gen: &Path, out: Option<&Path>) -> Result<()> {
    let extractor: Box<dyn FeatureExtractor> = match cfg.eval.extractor.as_str() {
        SpectralStats::ID => Box::new(SpectralStats { stft: std::sync::Arc::new(cfg.stft.clone()) }),
        FamilyClassifier::ID => {
            let dir = checkpoint::CheckpointDir::new(&cfg.checkpoint_dir);
            Box::new(load_extractor(&dir.load(Stage::Extractor)?)?)
        }
        other => {
            return Err(Error::Config(format!(
                "eval.extractor {other:?} is not available (use {} or {})",
                FamilyClassifier::ID,
                SpectralStats::ID
            )))
        }
    };
    let report = evaluate(real, gen, extractor.as_ref(), &cfg.eval)?;
    let text = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => {
            let dir = p.parent().filter(|d| !d.as_os_str().is_empty());
            if let Some(dir) = dir {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, &text)?;
            if let Some(dir) = dir {
                cfg.write_resolved(dir)?;
            }
        }
        None => println!("{text}"),
    }
    Ok(())
}
