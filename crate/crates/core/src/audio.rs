use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.samples.iter().position(|s| !s.is_finite()) {
            Some(i) => Err(Error::InvalidInput(format!("non-finite sample at index {i}"))),
            None => Ok(()),
        }
    }

    /// Scales so the largest absolute sample is 1. Silent clips are returned unchanged.
    pub fn peak_normalized(&self) -> Self {
        let peak = self.peak();
        if peak <= 0.0 {
            return self.clone();
        }
        let samples = self.samples.iter().map(|s| (s / peak).clamp(-1.0, 1.0)).collect();
        Self::new(samples, self.sample_rate)
    }

    /// Right-pads with silence or trims the tail to exactly `len` samples.
    pub fn fit_length(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self::new(samples, self.sample_rate)
    }

    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = hound::WavReader::open(path.as_ref())?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::InvalidInput(format!(
                "{}: expected mono audio, found {} channels",
                path.as_ref().display(),
                spec.channels
            )));
        }
        let samples = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f32 / 32768.0))
                .collect::<std::result::Result<Vec<_>, _>>()?,
            (hound::SampleFormat::Float, 32) => {
                reader.samples::<f32>().collect::<std::result::Result<Vec<_>, _>>()?
            }
            (fmt, bits) => {
                return Err(Error::InvalidInput(format!(
                    "{}: unsupported sample format {fmt:?}/{bits} bits",
                    path.as_ref().display()
                )))
            }
        };
        Ok(Self::new(samples, spec.sample_rate))
    }

    /// 16-bit PCM mono WAV bytes.
    pub fn to_wav_bytes(&self) -> Result<Vec<u8>> {
        let mut cursor = std::io::Cursor::new(Vec::new());
        {
            let spec = hound::WavSpec {
                channels: 1,
                sample_rate: self.sample_rate,
                bits_per_sample: 16,
                sample_format: hound::SampleFormat::Int,
            };
            let mut writer = hound::WavWriter::new(&mut cursor, spec)?;
            for &s in &self.samples {
                writer.write_sample(pcm16(s))?;
            }
            writer.finalize()?;
        }
        Ok(cursor.into_inner())
    }

    pub fn from_wav_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = hound::WavReader::new(std::io::Cursor::new(bytes))?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(Error::InvalidInput(
                "expected 16-bit PCM mono WAV".to_string(),
            ));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self::new(samples, spec.sample_rate))
    }

    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_wav_bytes()?)?;
        Ok(())
    }
}

fn pcm16(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_within_quantization() {
        let clip = AudioClip::new((0..400).map(|i| (i as f32 * 0.05).sin() * 0.8).collect(), 8000);
        let back = AudioClip::from_wav_bytes(&clip.to_wav_bytes().unwrap()).unwrap();
        assert_eq!(back.sample_rate, 8000);
        assert_eq!(back.len(), clip.len());
        for (a, b) in clip.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 16000.0);
        }
    }

    #[test]
    fn fit_length_pads_and_trims_tail() {
        let clip = AudioClip::new(vec![0.5, -1.0, 0.25], 10);
        assert_eq!(clip.fit_length(5).samples, vec![0.5, -1.0, 0.25, 0.0, 0.0]);
        assert_eq!(clip.fit_length(2).samples, vec![0.5, -1.0]);
    }

    #[test]
    fn peak_normalization() {
        let clip = AudioClip::new(vec![0.1, -0.4, 0.2], 10).peak_normalized();
        assert_eq!(clip.peak(), 1.0);
        assert_eq!(AudioClip::silence(4, 10).peak_normalized().peak(), 0.0);
    }

    #[test]
    fn rejects_non_finite() {
        let clip = AudioClip::new(vec![0.0, f32::NAN], 10);
        assert!(clip.check_finite().is_err());
    }
}
