//! Text-guided musical timbre generation.
//!
//! Audio notes are turned into a three-channel spectral image (log-magnitude,
//! sine phase, cosine phase), compressed by a VQ-GAN, paired with text through
//! a contrastive embedding, and generated by a latent diffusion model with
//! classifier-free guidance. The same trained models drive inpainting, global
//! transformation and note-length adjustment.

pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod manipulate;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod spectral;
pub mod train;
pub mod vqgan;

pub use audio::AudioClip;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use spectral::{istft_plus, stft_plus, SpectralImage, StftConfig};
