//! Phase-explicit spectral codec.
//!
//! A clip of fixed length is mapped to a three-channel image: natural-log
//! magnitude, sine of the phase angle and cosine of the phase angle of a
//! centered STFT. The inverse rebuilds the complex spectrum directly from those
//! channels and overlap-adds, so no phase retrieval is involved.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use image::{GrayImage, Luma};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowFn {
    /// Periodic Hann (`0.5 - 0.5 cos(2πn/N)`).
    Hann,
    Rectangular,
}

impl WindowFn {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowFn::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
            WindowFn::Rectangular => vec![1.0; len],
        }
    }

    fn code(self) -> u8 {
        match self {
            WindowFn::Hann => 0,
            WindowFn::Rectangular => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(WindowFn::Hann),
            1 => Ok(WindowFn::Rectangular),
            other => Err(Error::InvalidInput(format!("unknown window code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub window_size: usize,
    pub hop_size: usize,
    pub window_fn: WindowFn,
    pub eps_floor: f64,
    pub sample_rate: u32,
    /// Fixed clip duration in seconds.
    pub duration: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_size: 1024,
            hop_size: 256,
            window_fn: WindowFn::Hann,
            eps_floor: 1e-5,
            sample_rate: 16000,
            duration: 4.0,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 2 || self.window_size % 2 != 0 {
            return Err(Error::Config(format!(
                "window_size must be even and >= 2, got {}",
                self.window_size
            )));
        }
        if self.hop_size == 0 || self.hop_size > self.window_size {
            return Err(Error::Config(format!(
                "hop_size must be in 1..=window_size, got {}",
                self.hop_size
            )));
        }
        if !(self.eps_floor > 0.0) {
            return Err(Error::Config("eps_floor must be positive".into()));
        }
        if self.sample_rate == 0 || !(self.duration > 0.0) {
            return Err(Error::Config("sample_rate and duration must be positive".into()));
        }
        if !self.satisfies_cola() {
            return Err(Error::Config(format!(
                "{:?} window of {} samples is not constant-overlap-add at hop {}",
                self.window_fn, self.window_size, self.hop_size
            )));
        }
        Ok(())
    }

    /// Checks that the analysis window sums to a constant over a full period.
    pub fn satisfies_cola(&self) -> bool {
        if self.window_size % self.hop_size != 0 {
            return false;
        }
        let w = self.window_fn.coefficients(self.window_size);
        let sums: Vec<f64> = (0..self.hop_size)
            .map(|n| w.iter().skip(n).step_by(self.hop_size).sum())
            .collect();
        let first = sums[0];
        first > 0.0 && sums.iter().all(|s| (s - first).abs() <= 1e-9 * first.max(1.0))
    }

    pub fn num_samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    pub fn num_bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// Frame count for centered framing with `window_size / 2` zero padding per side.
    pub fn num_frames_for(&self, num_samples: usize) -> usize {
        1 + num_samples / self.hop_size
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames_for(self.num_samples())
    }

    /// Center frequency of a bin in Hz.
    pub fn bin_frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate as f64 / self.window_size as f64
    }
}

/// Three-channel spectral image stored channel-major: `[channel][bin][frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralImage {
    data: Vec<f32>,
    height: usize,
    width: usize,
    pub stft_config: Arc<StftConfig>,
}

pub const LOG_MAG: usize = 0;
pub const SIN_PHASE: usize = 1;
pub const COS_PHASE: usize = 2;

impl SpectralImage {
    pub fn new(data: Vec<f32>, height: usize, width: usize, stft_config: Arc<StftConfig>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "expected 3x{height}x{width} = {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self { data, height, width, stft_config })
    }

    /// Image of a silent clip: floor magnitude, zero phase.
    pub fn silent(height: usize, width: usize, stft_config: Arc<StftConfig>) -> Self {
        let plane = height * width;
        let floor = stft_config.eps_floor.ln() as f32;
        let mut data = vec![floor; 3 * plane];
        data[plane..2 * plane].fill(0.0);
        data[2 * plane..].fill(1.0);
        Self { data, height, width, stft_config }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (3, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn get(&self, c: usize, bin: usize, frame: usize) -> f32 {
        self.data[(c * self.height + bin) * self.width + frame]
    }

    /// Checks finiteness, the log-magnitude floor and unit phase modulus.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite spectral value at flat index {i}")));
        }
        let floor = self.stft_config.eps_floor.ln() as f32;
        if let Some(i) = self.channel(LOG_MAG).iter().position(|&v| v < floor - 1e-4) {
            return Err(Error::InvalidInput(format!(
                "log-magnitude below floor at bin {}, frame {}",
                i / self.width,
                i % self.width
            )));
        }
        for (i, (s, c)) in self.channel(SIN_PHASE).iter().zip(self.channel(COS_PHASE)).enumerate() {
            let m2 = (*s as f64).powi(2) + (*c as f64).powi(2);
            if (m2 - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidInput(format!(
                    "phase modulus^2 {m2:.6} out of tolerance at bin {}, frame {}",
                    i / self.width,
                    i % self.width
                )));
            }
        }
        Ok(())
    }

    /// Crops high bins and pads trailing silent frames so both spatial
    /// dimensions are multiples of `r`. Bins are cropped because the top of the
    /// spectrum carries the least energy; frames are padded so no audio is lost.
    pub fn to_model_grid(&self, r: usize) -> Self {
        let h = (self.height / r).max(1) * r;
        let w = self.width.div_ceil(r) * r;
        self.resized(h, w)
    }

    /// Inverse of [`to_model_grid`](Self::to_model_grid): restores the codec
    /// shape implied by the attached config, filling missing bins with silence.
    pub fn from_model_grid(&self) -> Self {
        let cfg = &self.stft_config;
        self.resized(cfg.num_bins(), cfg.num_frames())
    }

    /// Keeps the low bins and the leading frames; new cells are silent.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        let mut out = SpectralImage::silent(height, width, self.stft_config.clone());
        let hh = height.min(self.height);
        let ww = width.min(self.width);
        for c in 0..3 {
            for b in 0..hh {
                let src = (c * self.height + b) * self.width;
                let dst = (c * height + b) * width;
                out.data[dst..dst + ww].copy_from_slice(&self.data[src..src + ww]);
            }
        }
        out
    }

    /// Copies frames `[start, start + len)` into a new image.
    pub fn frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.width {
            return Err(Error::Shape(format!(
                "frame range {start}..{} exceeds width {}",
                start + len,
                self.width
            )));
        }
        let mut data = Vec::with_capacity(3 * self.height * len);
        for row in self.data.chunks(self.width) {
            data.extend_from_slice(&row[start..start + len]);
        }
        Self::new(data, self.height, len, self.stft_config.clone())
    }

    /// Linear magnitude averaged over frames, one value per bin.
    pub fn mean_amplitude_per_bin(&self) -> Vec<f64> {
        self.channel(LOG_MAG)
            .chunks(self.width)
            .map(|row| row.iter().map(|&v| (v as f64).exp()).sum::<f64>() / self.width as f64)
            .collect()
    }

    /// Amplitude-weighted mean bin index of the frame-averaged spectrum.
    pub fn amplitude_centroid(&self) -> f64 {
        let amp = self.mean_amplitude_per_bin();
        let total: f64 = amp.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        amp.iter().enumerate().map(|(b, a)| b as f64 * a).sum::<f64>() / total
    }

    /// Mean absolute difference over all three channels.
    pub fn l1_distance(&self, other: &SpectralImage) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum();
        Ok(sum / self.data.len() as f64)
    }

    const MAGIC: &'static [u8; 4] = b"TSPI";
    const VERSION: u32 = 1;

    /// Versioned little-endian container: magic, version, stft config, shape,
    /// then row-major f32 data.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let cfg = &self.stft_config;
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(cfg.window_size as u32).to_le_bytes())?;
        w.write_all(&(cfg.hop_size as u32).to_le_bytes())?;
        w.write_all(&[cfg.window_fn.code()])?;
        w.write_all(&cfg.eps_floor.to_le_bytes())?;
        w.write_all(&cfg.sample_rate.to_le_bytes())?;
        w.write_all(&cfg.duration.to_le_bytes())?;
        for dim in [3u32, self.height as u32, self.width as u32] {
            w.write_all(&dim.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::InvalidInput("not a spectral image container".into()));
        }
        let version = read_u32(&mut r)?;
        if version != Self::VERSION {
            return Err(Error::InvalidInput(format!("unsupported container version {version}")));
        }
        let window_size = read_u32(&mut r)? as usize;
        let hop_size = read_u32(&mut r)? as usize;
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let window_fn = WindowFn::from_code(code[0])?;
        let eps_floor = read_f64(&mut r)?;
        let sample_rate = read_u32(&mut r)?;
        let duration = read_f64(&mut r)?;
        let channels = read_u32(&mut r)?;
        let height = read_u32(&mut r)? as usize;
        let width = read_u32(&mut r)? as usize;
        if channels != 3 {
            return Err(Error::Shape(format!("expected 3 channels, header says {channels}")));
        }
        let mut bytes = vec![0u8; 3 * height * width * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let cfg = StftConfig { window_size, hop_size, window_fn, eps_floor, sample_rate, duration };
        Self::new(data, height, width, Arc::new(cfg))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Forward transform: audio clip to log-magnitude / sin-phase / cos-phase image.
pub fn stft_plus(clip: &AudioClip, cfg: &Arc<StftConfig>) -> Result<SpectralImage> {
    cfg.validate()?;
    clip.check_finite()?;
    let expected = cfg.num_samples();
    if clip.len() != expected {
        return Err(Error::Shape(format!(
            "clip has {} samples, config expects {expected}",
            clip.len()
        )));
    }
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::Shape(format!(
            "clip sample rate {} does not match config {}",
            clip.sample_rate, cfg.sample_rate
        )));
    }
    let spectrum = complex_stft(&clip.samples, cfg);
    let bins = cfg.num_bins();
    let frames = spectrum.len();
    let plane = bins * frames;
    let floor = cfg.eps_floor;
    let mut data = vec![0f32; 3 * plane];
    for (f, frame) in spectrum.iter().enumerate() {
        for (b, z) in frame.iter().enumerate() {
            let idx = b * frames + f;
            let angle = z.im.atan2(z.re);
            data[idx] = z.norm().max(floor).ln() as f32;
            data[plane + idx] = angle.sin() as f32;
            data[2 * plane + idx] = angle.cos() as f32;
        }
    }
    SpectralImage::new(data, bins, frames, cfg.clone())
}

/// Complex one-sided STFT with centered, zero-padded frames: `[frame][bin]`.
pub fn complex_stft(samples: &[f32], cfg: &StftConfig) -> Vec<Vec<Complex64>> {
    let n = cfg.window_size;
    let half = n / 2;
    let window = cfg.window_fn.coefficients(n);
    let frames = cfg.num_frames_for(samples.len());
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    (0..frames)
        .map(|f| {
            let start = (f * cfg.hop_size) as isize - half as isize;
            for (k, slot) in buf.iter_mut().enumerate() {
                let i = start + k as isize;
                let s = if i >= 0 && (i as usize) < samples.len() { samples[i as usize] as f64 } else { 0.0 };
                *slot = Complex64::new(s * window[k], 0.0);
            }
            fft.process(&mut buf);
            buf[..=half].to_vec()
        })
        .collect()
}

/// Inverse transform. The (sin, cos) pair of every bin is renormalized to unit
/// modulus before the complex spectrum is rebuilt; a modulus below 0.5 is
/// rejected as corrupt input.
fn image_spectrum(x: &SpectralImage, cfg: &Arc<StftConfig>) -> Result<Vec<Vec<Complex64>>> {
    cfg.validate()?;
    let bins = cfg.num_bins();
    if x.height() != bins {
        return Err(Error::Shape(format!("image has {} bins, config implies {bins}", x.height())));
    }
    if let Some(i) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite spectral value at flat index {i}")));
    }
    let frames = x.width();
    let (logmag, sin, cos) = (x.channel(LOG_MAG), x.channel(SIN_PHASE), x.channel(COS_PHASE));
    let mut spectrum = vec![vec![Complex64::new(0.0, 0.0); bins]; frames];
    for b in 0..bins {
        for f in 0..frames {
            let idx = b * frames + f;
            let (s, c) = (sin[idx] as f64, cos[idx] as f64);
            let modulus = (s * s + c * c).sqrt();
            if modulus < 0.5 {
                return Err(Error::DegeneratePhase { bin: b, frame: f, modulus });
            }
            let mag = (logmag[idx] as f64).exp();
            spectrum[f][b] = Complex64::new(mag * c / modulus, mag * s / modulus);
        }
    }
    Ok(spectrum)
}

/// Inverts a spectral image back to a clip of the configured duration.
pub fn istft_plus(x: &SpectralImage, cfg: &Arc<StftConfig>) -> Result<AudioClip> {
    let spectrum = image_spectrum(x, cfg)?;
    let samples = overlap_add(&spectrum, cfg, cfg.num_samples());
    Ok(AudioClip::new(samples, cfg.sample_rate))
}

/// Inverts an image of any width into exactly `num_samples` samples; used
/// when a note's length differs from the configured duration. Frames past the
/// image are silent.
pub fn istft_plus_len(x: &SpectralImage, cfg: &Arc<StftConfig>, num_samples: usize) -> Result<AudioClip> {
    let spectrum = image_spectrum(x, cfg)?;
    Ok(AudioClip::new(overlap_add(&spectrum, cfg, num_samples), cfg.sample_rate))
}

/// Weighted overlap-add inversion normalized by the summed squared window.
fn overlap_add(spectrum: &[Vec<Complex64>], cfg: &StftConfig, num_samples: usize) -> Vec<f32> {
    let n = cfg.window_size;
    let half = n / 2;
    let window = cfg.window_fn.coefficients(n);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let padded_len = num_samples + n;
    let mut acc = vec![0f64; padded_len];
    let mut norm = vec![0f64; padded_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (f, frame) in spectrum.iter().enumerate() {
        buf[..=half].copy_from_slice(frame);
        // DC and Nyquist bins of a real signal are real.
        buf[0].im = 0.0;
        buf[half].im = 0.0;
        for k in 1..half {
            buf[n - k] = frame[k].conj();
        }
        ifft.process(&mut buf);
        let start = f * cfg.hop_size;
        for k in 0..n {
            if start + k >= padded_len {
                break;
            }
            acc[start + k] += buf[k].re / n as f64 * window[k];
            norm[start + k] += window[k] * window[k];
        }
    }
    (0..num_samples)
        .map(|i| {
            let p = i + half;
            if norm[p] > 1e-10 {
                (acc[p] / norm[p]) as f32
            } else {
                0.0
            }
        })
        .collect()
}

/// Grayscale rendering of the log-magnitude channel, low frequencies at the
/// bottom, min/max normalized. A constant channel renders mid-gray.
pub fn spectral_to_image(x: &SpectralImage) -> GrayImage {
    let (h, w) = (x.height(), x.width());
    let logmag = x.channel(LOG_MAG);
    let (lo, hi) = logmag.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    GrayImage::from_fn(w as u32, h as u32, |col, row| {
        let bin = h - 1 - row as usize;
        let v = logmag[bin * w + col as usize];
        let level = if range > 0.0 { ((v - lo) / range * 255.0).round() } else { 128.0 };
        Luma([level as u8])
    })
}

pub fn spectral_png_bytes(x: &SpectralImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    spectral_to_image(x).write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}
