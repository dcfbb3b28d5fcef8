//! Note datasets: JSON-lines manifests, label-to-text augmentation and
//! timbre/text training pairs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::spectral::{stft_plus, SpectralImage, StftConfig};

pub const DEFAULT_QUALITIES: &str = include_str!("../assets/qualities.txt");
pub const DEFAULT_TEMPLATES: &str = include_str!("../assets/templates.txt");

pub const MAX_DESCRIPTION_CHARS: usize = 256;

/// Closed set of timbre quality tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QualityVocabulary {
    tags: BTreeSet<String>,
}

impl QualityVocabulary {
    pub fn parse(text: &str) -> Self {
        let tags = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        Self { tags }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.tags.contains(tag)
    }
}

impl Default for QualityVocabulary {
    fn default() -> Self {
        Self::parse(DEFAULT_QUALITIES)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteRecord {
    #[serde(rename = "audio")]
    pub audio_path: PathBuf,
    pub instrument_id: String,
    #[serde(rename = "source")]
    pub instrument_source: String,
    #[serde(rename = "family")]
    pub instrument_family: String,
    pub qualities: BTreeSet<String>,
    pub pitch: u8,
    pub velocity: u8,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    audio: PathBuf,
    instrument_id: String,
    source: String,
    family: String,
    #[serde(default)]
    qualities: Vec<String>,
    pitch: i64,
    velocity: i64,
}

/// Reads a JSON-lines manifest. Relative audio paths resolve against the
/// manifest's directory. Blank lines are skipped.
pub fn load_manifest(path: impl AsRef<Path>, vocab: &QualityVocabulary) -> Result<Vec<NoteRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let err = |line: usize, msg: String| Error::Manifest { path: path.to_path_buf(), line, msg };
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| err(line_no, e.to_string()))?;
        if !(0..=127).contains(&raw.pitch) {
            return Err(err(line_no, format!("pitch {} outside MIDI range 0-127", raw.pitch)));
        }
        if !(0..=127).contains(&raw.velocity) {
            return Err(err(line_no, format!("velocity {} outside 0-127", raw.velocity)));
        }
        if let Some(q) = raw.qualities.iter().find(|q| !vocab.contains(q)) {
            return Err(err(line_no, format!("unknown quality tag {q:?}")));
        }
        let audio_path = if raw.audio.is_absolute() { raw.audio } else { base.join(raw.audio) };
        records.push(NoteRecord {
            audio_path,
            instrument_id: raw.instrument_id,
            instrument_source: raw.source,
            instrument_family: raw.family,
            qualities: raw.qualities.into_iter().collect(),
            pitch: raw.pitch as u8,
            velocity: raw.velocity as u8,
        });
    }
    Ok(records)
}

/// Writes records as a manifest with paths relative to `dir` where possible.
pub fn write_manifest(path: impl AsRef<Path>, records: &[NoteRecord]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = String::new();
    for r in records {
        let audio = r.audio_path.strip_prefix(base).unwrap_or(&r.audio_path);
        let line = serde_json::json!({
            "audio": audio,
            "instrument_id": r.instrument_id,
            "source": r.instrument_source,
            "family": r.instrument_family,
            "qualities": r.qualities,
            "pitch": r.pitch,
            "velocity": r.velocity,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionStyle {
    Keywords,
    Natural,
    Phrase,
}

impl DescriptionStyle {
    pub const ALL: [DescriptionStyle; 3] = [Self::Keywords, Self::Natural, Self::Phrase];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "keywords" => Ok(Self::Keywords),
            "natural" => Ok(Self::Natural),
            "phrase" => Ok(Self::Phrase),
            other => Err(Error::InvalidInput(format!("unknown description style {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextDescription {
    pub text: String,
    pub style: DescriptionStyle,
}

impl TextDescription {
    pub fn new(text: impl Into<String>, style: DescriptionStyle) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("empty description".into()));
        }
        if text.chars().count() > MAX_DESCRIPTION_CHARS {
            return Err(Error::InvalidInput(format!("description longer than {MAX_DESCRIPTION_CHARS} characters")));
        }
        Ok(Self { text, style })
    }
}

/// Turns structured labels into a text description. Implementations must be
/// deterministic in `(record, style, seed)`.
pub trait Augmenter: Send + Sync {
    fn describe(&self, record: &NoteRecord, style: DescriptionStyle, seed: u64) -> Result<TextDescription>;
}

/// Template-driven augmenter; the default and the only one used offline.
#[derive(Debug, Clone)]
pub struct TemplateAugmenter {
    natural: Vec<String>,
    phrase: Vec<String>,
}

impl TemplateAugmenter {
    /// Parses `style: template` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut natural = Vec::new();
        let mut phrase = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (style, template) = line
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("template line {}: expected `style: template`", i + 1)))?;
            match DescriptionStyle::parse(style.trim()) {
                Ok(DescriptionStyle::Natural) => natural.push(template.trim().to_string()),
                Ok(DescriptionStyle::Phrase) => phrase.push(template.trim().to_string()),
                _ => {
                    return Err(Error::Config(format!(
                        "template line {}: style must be natural or phrase",
                        i + 1
                    )))
                }
            }
        }
        if natural.is_empty() || phrase.is_empty() {
            return Err(Error::Config("templates must define both natural and phrase styles".into()));
        }
        Ok(Self { natural, phrase })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl Default for TemplateAugmenter {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled templates parse")
    }
}

fn humanize(tag: &str) -> String {
    match tag {
        "nonlinear_env" => "nonlinear envelope".to_string(),
        other => other.replace('_', " "),
    }
}

fn with_article(word: &str) -> String {
    let vowel = word.chars().next().is_some_and(|c| "aeiou".contains(c.to_ascii_lowercase()));
    if vowel {
        format!("an {word}")
    } else {
        format!("a {word}")
    }
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Augmenter for TemplateAugmenter {
    fn describe(&self, record: &NoteRecord, style: DescriptionStyle, seed: u64) -> Result<TextDescription> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut qualities: Vec<String> = record.qualities.iter().map(|q| humanize(q)).collect();
        qualities.shuffle(&mut rng);
        let family = humanize(&record.instrument_family);
        let text = match style {
            DescriptionStyle::Keywords => {
                let mut tags = qualities;
                tags.push(family);
                tags.join(", ")
            }
            DescriptionStyle::Natural | DescriptionStyle::Phrase => {
                let pool = if style == DescriptionStyle::Natural { &self.natural } else { &self.phrase };
                let template = &pool[rng.gen_range(0..pool.len())];
                let joiner = if style == DescriptionStyle::Natural { " and " } else { " " };
                let source = humanize(&record.instrument_source);
                let rendered = template
                    .replace("{quality}", &qualities.join(joiner))
                    .replace("{a_source}", &with_article(&source))
                    .replace("{source}", &source)
                    .replace("{family}", &family);
                collapse_whitespace(&rendered)
            }
        };
        TextDescription::new(text, style)
    }
}

/// Relative weights of the three description styles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub keywords: f64,
    pub natural: f64,
    pub phrase: f64,
    /// Optional template file replacing the bundled one.
    pub templates: Option<PathBuf>,
    /// Optional quality vocabulary replacing the bundled one.
    pub qualities: Option<PathBuf>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { keywords: 1.0, natural: 1.0, phrase: 1.0, templates: None, qualities: None }
    }
}

impl AugmentConfig {
    pub fn sample_style(&self, rng: &mut impl Rng) -> DescriptionStyle {
        let weights = [self.keywords, self.natural, self.phrase];
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (style, w) in DescriptionStyle::ALL.iter().zip(weights) {
            if u < w {
                return *style;
            }
            u -= w;
        }
        DescriptionStyle::Keywords
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.keywords, self.natural, self.phrase];
        if w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("augment style weights must be non-negative with a positive sum".into()));
        }
        Ok(())
    }

    pub fn augmenter(&self) -> Result<TemplateAugmenter> {
        match &self.templates {
            Some(p) => TemplateAugmenter::load(p),
            None => Ok(TemplateAugmenter::default()),
        }
    }

    pub fn vocabulary(&self) -> Result<QualityVocabulary> {
        match &self.qualities {
            Some(p) => QualityVocabulary::load(p),
            None => Ok(QualityVocabulary::default()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub spectral: SpectralImage,
    pub description: TextDescription,
    pub record: NoteRecord,
    /// Seed that regenerates `description` from `record`.
    pub description_seed: u64,
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loads, peak-normalizes and pads/trims a record's audio to the configured length.
pub fn load_note_audio(record: &NoteRecord, cfg: &StftConfig) -> Result<AudioClip> {
    let clip = AudioClip::read_wav(&record.audio_path)?;
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::InvalidInput(format!(
            "{}: sample rate {} Hz, expected {} Hz (resampling is not supported)",
            record.audio_path.display(),
            clip.sample_rate,
            cfg.sample_rate
        )));
    }
    clip.check_finite()?;
    Ok(clip.peak_normalized().fit_length(cfg.num_samples()))
}

/// Builds one epoch of training pairs in a seed-determined order, with one
/// sampled description per record.
pub fn build_pairs<'a>(
    records: &'a [NoteRecord],
    stft_cfg: &Arc<StftConfig>,
    augment_cfg: &AugmentConfig,
    augmenter: &'a dyn Augmenter,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = Result<TrainingPair>> + 'a {
    let epoch_seed = mix_seed(seed, epoch);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    let stft_cfg = stft_cfg.clone();
    let augment_cfg = augment_cfg.clone();
    order.into_iter().map(move |i| {
        let record = &records[i];
        let clip = load_note_audio(record, &stft_cfg)?;
        let spectral = stft_plus(&clip, &stft_cfg)?;
        let description_seed = mix_seed(epoch_seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(description_seed);
        let style = augment_cfg.sample_style(&mut rng);
        let description = augmenter.describe(record, style, description_seed)?;
        Ok(TrainingPair { spectral, description, record: record.clone(), description_seed })
    })
}

pub mod toy {
    //! Synthetic harmonic notes: "bright" notes carry many slowly decaying
    //! harmonics, "dark" notes are low-passed to a few partials.

    use super::*;

    #[derive(Debug, Clone)]
    pub struct ToyNote {
        pub family: &'static str,
        pub source: &'static str,
        pub bright: bool,
        pub pitch: u8,
    }

    pub const TOY_SET: [ToyNote; 8] = [
        ToyNote { family: "guitar", source: "acoustic", bright: true, pitch: 57 },
        ToyNote { family: "keyboard", source: "electronic", bright: true, pitch: 60 },
        ToyNote { family: "brass", source: "acoustic", bright: true, pitch: 64 },
        ToyNote { family: "mallet", source: "synthetic", bright: true, pitch: 67 },
        ToyNote { family: "bass", source: "electronic", bright: false, pitch: 55 },
        ToyNote { family: "flute", source: "acoustic", bright: false, pitch: 59 },
        ToyNote { family: "organ", source: "synthetic", bright: false, pitch: 62 },
        ToyNote { family: "reed", source: "acoustic", bright: false, pitch: 65 },
    ];

    pub fn midi_to_hz(pitch: u8) -> f64 {
        440.0 * 2f64.powf((pitch as f64 - 69.0) / 12.0)
    }

    /// Renders a peak-normalized note of `num_samples` samples.
    pub fn render(note: &ToyNote, sample_rate: u32, num_samples: usize) -> AudioClip {
        let f0 = midi_to_hz(note.pitch);
        let nyquist = sample_rate as f64 / 2.0;
        let (rolloff, cutoff) = if note.bright { (0.6, nyquist * 0.95) } else { (2.5, nyquist * 0.22) };
        let partials: Vec<(f64, f64)> = (1..)
            .map(|k| (k as f64 * f0, 1.0 / (k as f64).powf(rolloff)))
            .take_while(|(f, _)| *f < cutoff)
            .collect();
        let sr = sample_rate as f64;
        let attack = 0.05 * num_samples as f64;
        let release_start = 0.75 * num_samples as f64;
        let samples: Vec<f32> = (0..num_samples)
            .map(|i| {
                let t = i as f64 / sr;
                let n = i as f64;
                let env = if n < attack {
                    n / attack
                } else if n < release_start {
                    1.0 - 0.3 * (n - attack) / (release_start - attack)
                } else {
                    0.7 * (1.0 - (n - release_start) / (num_samples as f64 - release_start))
                };
                let v: f64 = partials
                    .iter()
                    .map(|(f, a)| a * (2.0 * std::f64::consts::PI * f * t).sin())
                    .sum();
                (env * v) as f32
            })
            .collect();
        AudioClip::new(samples, sample_rate).peak_normalized()
    }

    pub fn record_for(note: &ToyNote, index: usize, audio_path: PathBuf) -> NoteRecord {
        NoteRecord {
            audio_path,
            instrument_id: format!("toy_{:03}", index),
            instrument_source: note.source.to_string(),
            instrument_family: note.family.to_string(),
            qualities: [if note.bright { "bright" } else { "dark" }.to_string()].into_iter().collect(),
            pitch: note.pitch,
            velocity: 100,
        }
    }

    /// Writes the eight toy notes plus `manifest.jsonl` into `dir`.
    pub fn write_toy_dataset(dir: impl AsRef<Path>, cfg: &StftConfig) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut records = Vec::new();
        for (i, note) in TOY_SET.iter().enumerate() {
            let path = dir.join(format!("{:02}_{}.wav", i, note.family));
            render(note, cfg.sample_rate, cfg.num_samples()).write_wav(&path)?;
            records.push(record_for(note, i, path));
        }
        let manifest = dir.join("manifest.jsonl");
        write_manifest(&manifest, &records)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::istft_plus;

    fn record(qualities: &[&str], family: &str, source: &str) -> NoteRecord {
        NoteRecord {
            audio_path: PathBuf::from("x.wav"),
            instrument_id: "id".into(),
            instrument_source: source.into(),
            instrument_family: family.into(),
            qualities: qualities.iter().map(|s| s.to_string()).collect(),
            pitch: 60,
            velocity: 100,
        }
    }

    #[test]
    fn keywords_bright_guitar() {
        let aug = TemplateAugmenter::default();
        let d = aug.describe(&record(&["bright"], "guitar", "acoustic"), DescriptionStyle::Keywords, 0).unwrap();
        assert_eq!(d.text, "bright, guitar");
    }

    #[test]
    fn natural_with_no_qualities() {
        let aug = TemplateAugmenter::default();
        let d = aug.describe(&record(&[], "flute", "acoustic"), DescriptionStyle::Natural, 1).unwrap();
        assert_eq!(d.text, "a sound played by an acoustic flute");
    }

    #[test]
    fn augmentation_is_deterministic() {
        let aug = TemplateAugmenter::default();
        let r = record(&["bright", "percussive", "reverb"], "mallet", "synthetic");
        for style in DescriptionStyle::ALL {
            for seed in 0..20 {
                assert_eq!(aug.describe(&r, style, seed).unwrap(), aug.describe(&r, style, seed).unwrap());
            }
        }
    }

    #[test]
    fn unknown_style_rejected() {
        assert!(DescriptionStyle::parse("haiku").is_err());
    }

    #[test]
    fn manifest_loading() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = QualityVocabulary::default();
        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(load_manifest(&empty, &vocab).unwrap().is_empty());

        let line = |id: &str| {
            format!(
                r#"{{"audio":"{id}.wav","instrument_id":"{id}","source":"acoustic","family":"guitar","qualities":["bright"],"pitch":60,"velocity":100}}"#
            )
        };
        let good = dir.path().join("good.jsonl");
        std::fs::write(&good, format!("{}\n{}\n{}\n", line("a"), line("b"), line("c"))).unwrap();
        let records = load_manifest(&good, &vocab).unwrap();
        assert_eq!(records.iter().map(|r| r.instrument_id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(records[0].audio_path, dir.path().join("a.wav"));

        let bad = dir.path().join("bad.jsonl");
        let missing_pitch = r#"{"audio":"b.wav","instrument_id":"b","source":"acoustic","family":"guitar","qualities":[],"velocity":100}"#;
        std::fs::write(&bad, format!("{}\n{}\n", line("a"), missing_pitch)).unwrap();
        match load_manifest(&bad, &vocab) {
            Err(Error::Manifest { line: 2, msg, .. }) => assert!(msg.contains("pitch"), "{msg}"),
            other => panic!("{other:?}"),
        }

        let unknown = dir.path().join("unknown.jsonl");
        std::fs::write(&unknown, line("a").replace("bright", "sparkly")).unwrap();
        assert!(matches!(load_manifest(&unknown, &vocab), Err(Error::Manifest { line: 1, .. })));

        assert!(matches!(load_manifest(dir.path().join("nope.jsonl"), &vocab), Err(Error::Io(_))));
    }

    fn tiny_cfg() -> Arc<StftConfig> {
        Arc::new(StftConfig {
            window_size: 64,
            hop_size: 32,
            sample_rate: 8000,
            duration: 0.252,
            ..StftConfig::default()
        })
    }

    #[test]
    fn build_pairs_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let manifest = toy::write_toy_dataset(dir.path(), &cfg).unwrap();
        let records = load_manifest(&manifest, &QualityVocabulary::default()).unwrap();
        let aug = TemplateAugmenter::default();
        let acfg = AugmentConfig::default();

        let one = &records[..1];
        let pairs: Vec<_> = build_pairs(one, &cfg, &acfg, &aug, 3, 0).collect::<Result<_>>().unwrap();
        assert_eq!(pairs.len(), 1);
        let audio = load_note_audio(&one[0], &cfg).unwrap();
        let back = istft_plus(&pairs[0].spectral, &cfg).unwrap();
        let err = audio.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err <= 1e-4, "{err}");
        let again = aug.describe(&pairs[0].record, pairs[0].description.style, pairs[0].description_seed).unwrap();
        assert_eq!(again, pairs[0].description);

        assert_eq!(build_pairs(&[], &cfg, &acfg, &aug, 3, 0).count(), 0);

        let run = |seed| -> Vec<(String, String)> {
            build_pairs(&records, &cfg, &acfg, &aug, seed, 1)
                .map(|p| p.map(|p| (p.record.instrument_id, p.description.text)))
                .collect::<Result<_>>()
                .unwrap()
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn wrong_sample_rate_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        AudioClip::silence(100, 22050).write_wav(&path).unwrap();
        let mut r = record(&[], "flute", "acoustic");
        r.audio_path = path;
        assert!(load_note_audio(&r, &tiny_cfg()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn normalized_fit_stays_in_range(len in 1usize..3000, target in 1usize..3000, gain in 0.01f32..10.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clip = AudioClip::new((0..len).map(|_| rng.gen_range(-1.0f32..1.0) * gain).collect(), 8000);
            let out = clip.peak_normalized().fit_length(target);
            proptest::prop_assert_eq!(out.len(), target);
            proptest::prop_assert!(out.samples.iter().all(|s| (-1.0..=1.0).contains(s)));
        }
    }
}
