use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use timbre_core::manipulate::InpaintMask;
use timbre_core::AudioClip;

fn timbre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timbre")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = timbre(args);
    assert!(out.status.success(), "timbre {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn smoke_config(dir: &Path) -> String {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml")).unwrap();
    let path = dir.join("smoke.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// A smoke run trained once through the CLI and shared by the tests that
/// only read its checkpoints.
struct Trained {
    dir: tempfile::TempDir,
    config: String,
}

impl Trained {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = smoke_config(dir.path());
        ok(&["--config", &config, "toy-data", "--out", &s(&dir.path().join("toy"))]);
        ok(&["--config", &config, "train", "--stage", "all"]);
        Trained { dir, config }
    })
}

fn json_lines(stdout: &str) -> Vec<Value> {
    stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn missing_upstream_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(dir.path());
    ok(&["--config", &config, "toy-data", "--out", &s(&dir.path().join("toy"))]);
    for stage in ["embedding", "diffusion"] {
        let out = timbre(&["--config", &config, "train", "--stage", stage]);
        assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).contains("vqgan"));
    }
    let out = timbre(&["--config", &config, "generate", "--out", &s(&dir.path().join("x.wav"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_arguments_and_config_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(timbre(&["train", "--stage", "unet"]).status.code(), Some(2));
    assert_eq!(timbre(&["frobnicate"]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[vqgan]\nwat = 1\n").unwrap();
    assert_eq!(timbre(&["--config", &s(&bad), "show-config"]).status.code(), Some(2));
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(dir.path());
    let text = ok(&["--config", &config, "show-config"]);
    let again = dir.path().join("again.toml");
    std::fs::write(&again, &text).unwrap();
    assert_eq!(ok(&["--config", &s(&again), "show-config"]), text);
}

#[test]
fn zero_steps_writes_initialization_and_fixed_seed_training_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    for dir in [&a, &b] {
        let config = smoke_config(dir.path());
        ok(&["--config", &config, "toy-data", "--out", &s(&dir.path().join("toy"))]);
        let init = json_lines(&ok(&["--config", &config, "train", "--stage", "vqgan", "--steps", "0"]));
        assert_eq!(init[0]["step"], 0);
        assert!(dir.path().join("checkpoints/vqgan.safetensors").is_file());
        let out = json_lines(&ok(&["--config", &config, "train", "--stage", "vqgan", "--seed", "9", "--fresh"]));
        assert_eq!(out[0]["step"], 4);
        hashes.push((
            out[0]["sha256"].as_str().unwrap().to_string(),
            std::fs::read_to_string(dir.path().join("checkpoints/vqgan_loss.csv")).unwrap(),
        ));
        assert!(dir.path().join("checkpoints/config.resolved.toml").is_file());
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_eq!(hashes[0].1.lines().count(), 5);
}

#[test]
fn resume_continues_and_completed_runs_are_no_ops() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(dir.path());
    ok(&["--config", &config, "toy-data", "--out", &s(&dir.path().join("toy"))]);
    ok(&["--config", &config, "train", "--stage", "vqgan", "--steps", "2"]);
    let resumed = json_lines(&ok(&["--config", &config, "train", "--stage", "vqgan", "--steps", "3"]));
    assert_eq!(resumed[0]["start_step"], 2);
    assert_eq!(resumed[0]["step"], 3);
    let csv = std::fs::read_to_string(dir.path().join("checkpoints/vqgan_loss.csv")).unwrap();
    assert_eq!(csv.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect::<Vec<_>>(), ["0", "1", "2"]);
    let again = json_lines(&ok(&["--config", &config, "train", "--stage", "vqgan", "--steps", "3"]));
    assert_eq!(again[0]["start_step"], 3);
    assert_eq!(again[0]["sha256"], resumed[0]["sha256"]);
}

#[test]
fn generate_is_deterministic_and_writes_sidecars() {
    let t = trained();
    let mut wavs = Vec::new();
    for i in 0..2 {
        let out = t.path(&format!("gen/a{i}.wav"));
        let printed: Value = serde_json::from_str(&ok(&[
            "--config", &t.config, "generate", "--prompt", "bright, guitar", "--guidance", "2.5", "--seed", "7", "--out", &s(&out),
        ]))
        .unwrap();
        assert!(Path::new(printed["png"].as_str().unwrap()).is_file());
        wavs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(wavs[0], wavs[1]);
    let clip = AudioClip::from_wav_bytes(&wavs[0]).unwrap();
    assert_eq!((clip.sample_rate, clip.len()), (8000, 2016));
    let sidecar: Value = serde_json::from_str(&std::fs::read_to_string(t.path("gen/a0.json")).unwrap()).unwrap();
    assert_eq!(sidecar["params"]["seed"], 7);
    assert_eq!(sidecar["params"]["w"], 2.5);
    assert!(t.path("gen/config.resolved.toml").is_file());

    let other = t.path("gen/b.wav");
    ok(&["--config", &t.config, "generate", "--prompt", "bright, guitar", "--guidance", "2.5", "--seed", "8", "--out", &s(&other)]);
    assert_ne!(std::fs::read(other).unwrap(), wavs[0]);
}

#[test]
fn empty_prompt_generates_unconditionally() {
    let t = trained();
    let out = t.path("uncond/u.wav");
    ok(&["--config", &t.config, "generate", "--seed", "1", "--steps", "3", "--out", &s(&out)]);
    assert_eq!(AudioClip::read_wav(&out).unwrap().len(), 2016);
}

#[test]
fn edit_identities() {
    let t = trained();
    let input = s(&t.path("toy/03_mallet.wav"));
    let run = |cmd: &str, extra: &[&str], name: &str| -> Vec<u8> {
        let out = t.path(&format!("edits/{name}.wav"));
        let mut args = vec!["--config", t.config.as_str(), cmd, "--input", input.as_str(), "--seed", "3", "--out"];
        let out_s = s(&out);
        args.push(&out_s);
        args.extend_from_slice(extra);
        ok(&args);
        std::fs::read(out).unwrap()
    };
    let round_trip = run("transform", &["--t0", "0"], "t0");

    // A keep-everything mask returns the codec round trip as well.
    let png = t.path("edits/spec.png");
    let mask = t.path("edits/mask.png");
    ok(&["--config", &t.config, "spectrogram", "--input", &input, "--out", &s(&png), "--mask-template", &s(&mask)]);
    assert_eq!(run("inpaint", &["--mask", &s(&mask)], "keep"), round_trip);
    let m = InpaintMask::from_png_bytes(&std::fs::read(&mask).unwrap()).unwrap();
    assert!(m.all_known());
    std::fs::write(t.path("edits/mask.json"), m.to_rle_json()).unwrap();
    assert_eq!(run("inpaint", &["--mask", &s(&t.path("edits/mask.json"))], "keep_json"), round_trip);

    // Same-length extension regenerates nothing.
    assert_eq!(run("extend", &["--target-frames", "64"], "same"), round_trip);
    let longer = run("extend", &["--target-frames", "128"], "long");
    assert_eq!(AudioClip::from_wav_bytes(&longer).unwrap().len(), 127 * 32);

    let half = InpaintMask::known_columns(m.height, m.width, 0, m.width / 2);
    std::fs::write(t.path("edits/half.png"), half.to_png_bytes().unwrap()).unwrap();
    assert_ne!(run("inpaint", &["--mask", &s(&t.path("edits/half.png"))], "half"), round_trip);

    let wrong = InpaintMask::filled(m.height, m.width + 1, true);
    std::fs::write(t.path("edits/wrong.png"), wrong.to_png_bytes().unwrap()).unwrap();
    let out = timbre(&["--config", &t.config, "inpaint", "--input", &input, "--mask", &s(&t.path("edits/wrong.png")), "--out", &s(&t.path("edits/w.wav"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn replay_reproduces_the_output() {
    let t = trained();
    let out = t.path("replay/orig.wav");
    let input = s(&t.path("toy/05_flute.wav"));
    ok(&["--config", &t.config, "transform", "--input", &input, "--t0", "12", "--prompt", "bright", "--seed", "4", "--out", &s(&out)]);
    let printed: Value = serde_json::from_str(&ok(&[
        "--config", &t.config, "replay", &s(&t.path("replay/orig.json")), "--out", &s(&t.path("replay/again.wav")),
    ]))
    .unwrap();
    assert_eq!(printed["matches_original"], true);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(t.path("replay/again.wav")).unwrap());

    // A different input file with a different hash is refused.
    let other = s(&t.path("toy/06_organ.wav"));
    let res = timbre(&["--config", &t.config, "replay", &s(&t.path("replay/orig.json")), "--out", &s(&t.path("replay/x.wav")), "--input", &other]);
    assert!(!res.status.success());
}

#[test]
fn evaluate_reports_metrics() {
    let t = trained();
    let gen = t.path("evalgen");
    std::fs::create_dir_all(&gen).unwrap();
    for seed in 0..4 {
        ok(&["--config", &t.config, "generate", "--prompt", "dark", "--seed", &seed.to_string(), "--steps", "2", "--out", &s(&gen.join(format!("g{seed}.wav")))]);
    }
    let report_path = t.path("eval/report.json");
    ok(&["--config", &t.config, "evaluate", "--real", &s(&t.path("toy")), "--gen", &s(&gen), "--out", &s(&report_path)]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(report_path).unwrap()).unwrap();
    assert!(report["fad"].as_f64().unwrap().is_finite());
    assert!(report["is_score"].is_null());
    assert_eq!(report["n_real"], 8);
    assert_eq!(report["n_gen"], 4);
}
