//! Zero-shot editing with a trained latent diffusion model: RePaint-style
//! inpainting, text-guided transformation from a partial noising strength,
//! and note-length adjustment by inpainting an extended sustain.

use std::collections::HashMap;
use std::io::Cursor;

use image::{GrayImage, ImageFormat, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::mix_seed;
use crate::diffusion::{q_sample_with, respaced_timesteps, DiffusionModel, LatentBatch};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::spectral::SpectralImage;
use crate::vqgan::{LatentCode, VqGan};

/// Binary keep/regenerate grid; `1` = known (keep), `0` = regenerate.
/// Used both at spectral resolution (as drawn) and at latent resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InpaintMask {
    cells: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RleMask {
    height: usize,
    width: usize,
    /// `(value, count)` runs over row-major cells.
    runs: Vec<(u8, usize)>,
}

impl InpaintMask {
    pub fn new(cells: Vec<u8>, height: usize, width: usize) -> Result<Self> {
        if cells.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!("mask has {} cells for {height}x{width}", cells.len())));
        }
        if cells.iter().any(|v| *v > 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(Self { cells, height, width })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self { cells: vec![value as u8; height * width], height, width }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, known: bool) {
        self.cells[row * self.width + col] = known as u8;
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn all_known(&self) -> bool {
        self.cells.iter().all(|v| *v == 1)
    }

    pub fn none_known(&self) -> bool {
        self.cells.iter().all(|v| *v == 0)
    }

    /// Keeps columns `[start, end)` and regenerates everything else.
    pub fn known_columns(height: usize, width: usize, start: usize, end: usize) -> Self {
        let mut m = Self::filled(height, width, false);
        for r in 0..height {
            for c in start..end.min(width) {
                m.set(r, c, true);
            }
        }
        m
    }

    /// Reads a 0/255 grayscale PNG drawn over the spectrogram raster, where
    /// the top row is the highest frequency bin. Pixels ≥ 128 are known.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut cells = vec![0u8; w * h];
        for (x, y, p) in img.enumerate_pixels() {
            let bin = h - 1 - y as usize;
            cells[bin * w + x as usize] = (p.0[0] >= 128) as u8;
        }
        Self::new(cells, h, w)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let bin = self.height - 1 - y as usize;
            Luma([if self.get(bin, x as usize) { 255 } else { 0 }])
        });
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn to_rle_json(&self) -> String {
        let mut runs: Vec<(u8, usize)> = Vec::new();
        for &v in &self.cells {
            match runs.last_mut() {
                Some((value, count)) if *value == v => *count += 1,
                _ => runs.push((v, 1)),
            }
        }
        serde_json::to_string(&RleMask { height: self.height, width: self.width, runs }).expect("mask serializes")
    }

    pub fn from_rle_json(text: &str) -> Result<Self> {
        let rle: RleMask = serde_json::from_str(text)?;
        let mut cells = Vec::with_capacity(rle.height * rle.width);
        for (value, count) in rle.runs {
            if cells.len() + count > rle.height * rle.width {
                return Err(Error::Shape("mask runs exceed the declared size".into()));
            }
            cells.extend(std::iter::repeat(value).take(count));
        }
        Self::new(cells, rle.height, rle.width)
    }
}

/// Maps a spectral-resolution mask to latent resolution: a latent cell is kept
/// only when every spectral pixel it covers is kept.
pub fn spectral_mask_to_latent(mask: &InpaintMask, r: usize) -> Result<InpaintMask> {
    if r == 0 || mask.height % r != 0 || mask.width % r != 0 {
        return Err(Error::Shape(format!("mask {}x{} is not divisible by r={r}", mask.height, mask.width)));
    }
    let (h, w) = (mask.height / r, mask.width / r);
    let mut out = InpaintMask::filled(h, w, true);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.get(y, x) {
                out.set(y / r, x / r, false);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepaintConfig {
    pub jump_length: usize,
    pub resample_count: usize,
    pub w: f64,
    pub seed: u64,
    /// Respaced sampling steps; `None` uses the diffusion model's default.
    pub steps: Option<usize>,
}

impl Default for RepaintConfig {
    fn default() -> Self {
        Self { jump_length: 10, resample_count: 2, w: 3.0, seed: 0, steps: None }
    }
}

impl RepaintConfig {
    pub fn validate(&self) -> Result<()> {
        if self.jump_length == 0 || self.resample_count == 0 {
            return Err(Error::Config("repaint: jump_length and resample_count must be at least 1".into()));
        }
        if !(self.w >= 0.0) {
            return Err(Error::Config("repaint: guidance scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// Visiting order over step positions `S..=0` with resampling jumps: after
/// reaching a jump position the chain is re-noised `jump_length` positions
/// and denoised again, `resample_count - 1` times per jump position.
pub fn jump_schedule(positions: usize, jump_length: usize, resample_count: usize) -> Vec<usize> {
    let mut jumps: HashMap<i64, usize> = HashMap::new();
    if positions > jump_length {
        for j in (0..positions - jump_length).step_by(jump_length) {
            jumps.insert(j as i64, resample_count - 1);
        }
    }
    // Model indices run from S-1 down to 0; -1 is the clean latent.
    let mut t = positions as i64;
    let mut seq = Vec::new();
    while t >= 1 {
        t -= 1;
        seq.push(t);
        if let Some(left) = jumps.get_mut(&t) {
            if *left > 0 {
                *left -= 1;
                for _ in 0..jump_length {
                    t += 1;
                    seq.push(t);
                }
            }
        }
    }
    seq.push(-1);
    seq.into_iter().map(|m| (m + 1) as usize).collect()
}

fn check_mask(z: &LatentCode, mask: &InpaintMask) -> Result<()> {
    if (mask.height, mask.width) != (z.height, z.width) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match latent {}x{}",
            mask.height, mask.width, z.height, z.width
        )));
    }
    Ok(())
}

/// RePaint inpainting: at every reverse step the known cells are replaced by
/// the input noised to the matching level; known cells of the result equal
/// `z_known` exactly.
pub fn repaint(
    model: &DiffusionModel,
    z_known: &LatentCode,
    mask: &InpaintMask,
    cond: &Embedding,
    null: &Embedding,
    cfg: &RepaintConfig,
) -> Result<LatentCode> {
    cfg.validate()?;
    check_mask(z_known, mask)?;
    if mask.all_known() {
        return Ok(z_known.clone());
    }
    let steps = cfg.steps.or(model.config.sample_steps);
    if mask.none_known() {
        // Nothing to harmonize with: plain sampling under the same seed.
        return Ok(model.sample(&[cond], null, cfg.w, &[cfg.seed], steps)?.remove(0));
    }

    let ts = respaced_timesteps(model.schedule.len(), steps);
    let tau = |p: usize| if p == 0 { 0 } else { ts[p - 1] };
    let guidance = model.guidance(&[cond], null, cfg.w)?;
    let known = LatentBatch::from_latents(std::slice::from_ref(z_known), model.latent_scale)?;
    let plane = z_known.height * z_known.width;
    let keep: Vec<bool> = (0..known.item_len()).map(|i| mask.cells()[i % plane] == 1).collect();

    let mut rngs = [ChaCha8Rng::seed_from_u64(cfg.seed)];
    let mut known_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x4B4E));
    let mut z = LatentBatch::noise(z_known.shape(), &mut rngs);
    let order = jump_schedule(ts.len(), cfg.jump_length, cfg.resample_count);
    for pair in order.windows(2) {
        let (p, q) = (pair[0], pair[1]);
        if q < p {
            let generated = guidance.step(&z, tau(p), tau(q), &mut rngs)?;
            let known_part = if q == 0 {
                known.data.clone()
            } else {
                let eps: Vec<f64> = (0..known.data.len()).map(|_| known_rng.sample(StandardNormal)).collect();
                q_sample_with(&known.data, &eps, model.schedule.alpha_bar(tau(q)))?
            };
            for (i, v) in z.data.iter_mut().enumerate() {
                *v = if keep[i] { known_part[i] } else { generated.data[i] };
            }
        } else {
            let ratio = model.schedule.alpha_bar(tau(q)) / model.schedule.alpha_bar(tau(p));
            let (a, b) = (ratio.sqrt(), (1.0 - ratio).sqrt());
            for v in &mut z.data {
                *v = a * *v + b * rngs[0].sample::<f64, _>(StandardNormal);
            }
        }
    }
    let mut out = z.to_latents(model.latent_scale)?.remove(0);
    // Rescaling round-trips through f64; restore the known cells bit-exactly.
    for (i, v) in out.data.iter_mut().enumerate() {
        if keep[i] {
            *v = z_known.data[i];
        }
    }
    Ok(out)
}

/// Noises `z_input` to step `t0` and denoises it under the text condition.
/// `t0 = 0` returns the input unchanged; `t0 = T` starts from (almost) pure
/// noise and follows the same step sequence as plain sampling.
#[allow(clippy::too_many_arguments)]
pub fn transform(
    model: &DiffusionModel,
    z_input: &LatentCode,
    t0: usize,
    cond: &Embedding,
    null: &Embedding,
    w: f64,
    steps: Option<usize>,
    seed: u64,
) -> Result<LatentCode> {
    let total = model.schedule.len();
    if t0 > total {
        return Err(Error::InvalidInput(format!("T0 = {t0} outside [0, {total}]")));
    }
    if t0 == 0 {
        return Ok(z_input.clone());
    }
    let guidance = model.guidance(&[cond], null, w)?;
    let mut rngs = [ChaCha8Rng::seed_from_u64(seed)];
    let x = LatentBatch::from_latents(std::slice::from_ref(z_input), model.latent_scale)?;
    let eps = LatentBatch::noise(z_input.shape(), &mut rngs);
    let z = LatentBatch { data: q_sample_with(&x.data, &eps.data, model.schedule.alpha_bar(t0))?, ..x };
    let mut ts: Vec<usize> = std::iter::once(t0)
        .chain(respaced_timesteps(total, steps.or(model.config.sample_steps)).into_iter().filter(|t| *t < t0))
        .collect();
    ts[1..].reverse();
    Ok(guidance.denoise(z, &ts, &mut rngs)?.to_latents(model.latent_scale)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtendConfig {
    /// Leading share of latent columns copied verbatim.
    pub attack_fraction: f64,
    /// Trailing share of latent columns copied verbatim.
    pub release_fraction: f64,
}

impl Default for ExtendConfig {
    fn default() -> Self {
        Self { attack_fraction: 0.25, release_fraction: 0.25 }
    }
}

impl ExtendConfig {
    /// Attack and release widths in latent columns for a note `width` columns wide.
    pub fn split(&self, width: usize) -> Result<(usize, usize)> {
        let valid = |f: f64| (0.0..1.0).contains(&f);
        if !valid(self.attack_fraction) || !valid(self.release_fraction) {
            return Err(Error::Config("extend: fractions must lie in [0, 1)".into()));
        }
        let attack = ((width as f64 * self.attack_fraction).round() as usize).max(1);
        let release = ((width as f64 * self.release_fraction).round() as usize).max(1);
        if attack + release >= width {
            return Err(Error::Config(format!("extend: attack {attack} + release {release} leave no sustain in {width} columns")));
        }
        Ok((attack, release))
    }
}

#[derive(Debug, Clone)]
pub struct Extended {
    pub spectral: SpectralImage,
    pub latent: LatentCode,
    pub requested_frames: usize,
    /// `latent width × r`; differs from the request when it was rounded up.
    pub frames: usize,
    /// Latent columns that were generated rather than copied.
    pub generated_columns: Vec<usize>,
}

impl Extended {
    pub fn rounded(&self) -> bool {
        self.frames != self.requested_frames
    }
}

fn gather_columns(z: &LatentCode, cols: &[usize]) -> LatentCode {
    let (c, h, w) = z.shape();
    let mut data = Vec::with_capacity(c * h * cols.len());
    for ch in 0..c {
        for y in 0..h {
            data.extend(cols.iter().map(|&x| z.data[(ch * h + y) * w + x]));
        }
    }
    LatentCode { data, channels: c, height: h, width: cols.len(), quantized: z.quantized }
}

fn write_columns(dst: &mut LatentCode, start: usize, src: &LatentCode) {
    let (c, h, w) = dst.shape();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..src.width {
                dst.data[(ch * h + y) * w + start + x] = src.data[(ch * h + y) * src.width + x];
            }
        }
    }
}

/// Changes the note length to `target_frames` spectral frames (rounded up to
/// a multiple of `r`). The latent attack and release are copied, the sustain
/// is trimmed or tiled, and tiled columns are regenerated by inpainting in
/// windows of the model's native width, left to right.
#[allow(clippy::too_many_arguments)]
pub fn extend_length(
    vqgan: &VqGan,
    model: &DiffusionModel,
    x: &SpectralImage,
    target_frames: usize,
    cond: &Embedding,
    null: &Embedding,
    cfg: &RepaintConfig,
    split: &ExtendConfig,
) -> Result<Extended> {
    let r = vqgan.config.r;
    let source = vqgan.encode_quantized(std::slice::from_ref(x))?.remove(0);
    let (_, h, w) = source.shape();
    let (attack, release) = split.split(w)?;
    let target_cols = target_frames.div_ceil(r);
    if target_cols < attack + release {
        return Err(Error::InvalidInput(format!(
            "target of {target_frames} frames is below the minimum {} (attack + release)",
            (attack + release) * r
        )));
    }
    let sustain: Vec<usize> = (attack..w - release).collect();
    let mut cols: Vec<usize> = (0..attack).collect();
    let mut generated = Vec::new();
    if target_cols <= w {
        cols.extend(sustain.iter().take(target_cols - attack - release));
    } else {
        cols.extend(&sustain);
        for k in 0..target_cols - w {
            generated.push(cols.len());
            cols.push(sustain[k % sustain.len()]);
        }
    }
    cols.extend(w - release..w);
    let mut canvas = gather_columns(&source, &cols);

    if !generated.is_empty() {
        let mut known = vec![true; target_cols];
        for &c in &generated {
            known[c] = false;
        }
        let stride = (w / 2).max(1);
        let mut starts: Vec<usize> = (0..=target_cols - w).step_by(stride).collect();
        if starts.last() != Some(&(target_cols - w)) {
            starts.push(target_cols - w);
        }
        for (k, &start) in starts.iter().enumerate() {
            if known[start..start + w].iter().all(|v| *v) {
                continue;
            }
            let window = canvas.columns(start, w)?;
            let mut mask = InpaintMask::filled(h, w, true);
            for c in 0..w {
                if !known[start + c] {
                    for y in 0..h {
                        mask.set(y, c, false);
                    }
                }
            }
            let window_cfg = RepaintConfig { seed: mix_seed(cfg.seed, k as u64), ..cfg.clone() };
            let filled = repaint(model, &window, &mask, cond, null, &window_cfg)?;
            write_columns(&mut canvas, start, &filled);
            known[start..start + w].iter_mut().for_each(|v| *v = true);
        }
        canvas.quantized = false;
    }
    let spectral = vqgan.decode(&canvas)?;
    Ok(Extended { spectral, latent: canvas, requested_frames: target_frames, frames: target_cols * r, generated_columns: generated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DiffusionConfig;
    use crate::embedding::Modality;
    use candle_core::DType;

    #[test]
    fn mask_downsampling_examples() {
        let ones = InpaintMask::filled(8, 12, true);
        assert!(spectral_mask_to_latent(&ones, 4).unwrap().all_known());

        let mut single = ones.clone();
        single.set(5, 10, false);
        let down = spectral_mask_to_latent(&single, 4).unwrap();
        for y in 0..2 {
            for x in 0..3 {
                assert_eq!(down.get(y, x), (y, x) != (1, 2));
            }
        }
        assert!(spectral_mask_to_latent(&InpaintMask::filled(6, 8, true), 4).is_err());
    }

    #[test]
    fn checkerboard_matches_per_block_oracle() {
        let r = 3;
        let (h, w) = (4 * r, 5 * r);
        let cells: Vec<u8> = (0..h * w).map(|i| (((i / w) / r + (i % w) / r) % 2) as u8).collect();
        let mask = InpaintMask::new(cells, h, w).unwrap();
        let down = spectral_mask_to_latent(&mask, r).unwrap();
        for by in 0..4 {
            for bx in 0..5 {
                let all = (0..r).all(|dy| (0..r).all(|dx| mask.get(by * r + dy, bx * r + dx)));
                assert_eq!(down.get(by, bx), all);
                assert_eq!(down.get(by, bx), (by + bx) % 2 == 1);
            }
        }
    }

    #[test]
    fn mask_exchange_formats_round_trip() {
        let mut m = InpaintMask::filled(6, 10, true);
        m.set(0, 3, false);
        m.set(5, 9, false);
        assert_eq!(InpaintMask::from_rle_json(&m.to_rle_json()).unwrap(), m);
        assert_eq!(InpaintMask::from_png_bytes(&m.to_png_bytes().unwrap()).unwrap(), m);
        // Bin 0 is drawn on the bottom row.
        let img = image::load_from_memory(&m.to_png_bytes().unwrap()).unwrap().to_luma8();
        assert_eq!(img.get_pixel(3, 5).0[0], 0);
        assert!(InpaintMask::new(vec![0, 2], 1, 2).is_err());
        assert!(InpaintMask::from_rle_json(r#"{"height":1,"width":2,"runs":[[1,3]]}"#).is_err());
    }

    #[test]
    fn jump_schedule_shape() {
        assert_eq!(jump_schedule(4, 10, 2), vec![4, 3, 2, 1, 0]);
        assert_eq!(jump_schedule(3, 1, 1), vec![3, 2, 1, 0]);
        let seq = jump_schedule(6, 2, 2);
        assert_eq!(seq, vec![6, 5, 4, 3, 4, 5, 4, 3, 2, 1, 2, 3, 2, 1, 0]);
        assert_eq!(seq.first(), Some(&6));
        assert_eq!(seq.last(), Some(&0));
        assert!(seq.windows(2).all(|p| p[0].abs_diff(p[1]) == 1));
    }

    fn toy() -> DiffusionModel {
        let cfg = DiffusionConfig { timesteps: 20, base_channels: 8, sample_steps: Some(8), ..Default::default() };
        let mut m = DiffusionModel::new(cfg, (2, 4, 8), 3, DType::F32).unwrap();
        m.latent_scale = 1.7;
        m
    }

    fn emb(v: [f32; 3]) -> Embedding {
        Embedding { vector: v.to_vec(), modality: Modality::Text }
    }

    fn latent(seed: u64) -> LatentCode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentCode::new((0..64).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), 2, 4, 8, true).unwrap()
    }

    #[test]
    fn repaint_degenerate_masks() {
        let model = toy();
        let (c, n) = (emb([1.0, 0.0, 0.0]), emb([0.0, 1.0, 0.0]));
        let z = latent(1);
        let cfg = RepaintConfig { jump_length: 2, resample_count: 2, w: 2.0, seed: 5, steps: None };
        assert_eq!(repaint(&model, &z, &InpaintMask::filled(4, 8, true), &c, &n, &cfg).unwrap(), z);
        let free = repaint(&model, &z, &InpaintMask::filled(4, 8, false), &c, &n, &cfg).unwrap();
        assert_eq!(free, model.sample(&[&c], &n, 2.0, &[5], None).unwrap().remove(0));
        assert!(repaint(&model, &z, &InpaintMask::filled(4, 6, true), &c, &n, &cfg).is_err());
    }

    #[test]
    fn repaint_preserves_known_cells_and_varies_unknown() {
        let model = toy();
        let (c, n) = (emb([1.0, 0.0, 0.0]), emb([0.0, 1.0, 0.0]));
        let z = latent(2);
        let mask = InpaintMask::known_columns(4, 8, 0, 4);
        let run = |seed| {
            let cfg = RepaintConfig { jump_length: 2, resample_count: 2, w: 1.5, seed, steps: None };
            repaint(&model, &z, &mask, &c, &n, &cfg).unwrap()
        };
        let (a, b) = (run(1), run(2));
        let mut differs = false;
        for ch in 0..2 {
            for y in 0..4 {
                for x in 0..8 {
                    let i = (ch * 4 + y) * 8 + x;
                    if x < 4 {
                        assert_eq!(a.data[i], z.data[i]);
                        assert_eq!(b.data[i], z.data[i]);
                    } else {
                        differs |= a.data[i] != b.data[i];
                    }
                }
            }
        }
        assert!(differs);
        assert_eq!(run(1), a);
    }

    #[test]
    fn transform_endpoints() {
        let model = toy();
        let (c, n) = (emb([1.0, 0.0, 0.0]), emb([0.0, 1.0, 0.0]));
        let z = latent(3);
        assert_eq!(transform(&model, &z, 0, &c, &n, 2.0, None, 9).unwrap(), z);
        assert!(transform(&model, &z, 21, &c, &n, 2.0, None, 9).is_err());

        // At T0 = T the first draw replaces sampling's z_T and every later
        // step (timesteps and noise draws) is the one plain sampling takes.
        let full = transform(&model, &z, 20, &c, &n, 2.0, None, 9).unwrap();
        let guidance = model.guidance(&[&c], &n, 2.0).unwrap();
        let mut rngs = [ChaCha8Rng::seed_from_u64(9)];
        let eps = LatentBatch::noise(z.shape(), &mut rngs);
        let x = LatentBatch::from_latents(std::slice::from_ref(&z), model.latent_scale).unwrap();
        let start = LatentBatch { data: q_sample_with(&x.data, &eps.data, model.schedule.alpha_bar(20)).unwrap(), ..x };
        let mut ts = respaced_timesteps(20, model.config.sample_steps);
        ts.reverse();
        let expected = guidance.denoise(start, &ts, &mut rngs).unwrap().to_latents(model.latent_scale).unwrap();
        assert_eq!(full, expected[0]);
        assert_eq!(transform(&model, &z, 10, &c, &n, 2.0, None, 9).unwrap(), transform(&model, &z, 10, &c, &n, 2.0, None, 9).unwrap());
    }

    #[test]
    fn extend_config_split() {
        assert_eq!(ExtendConfig::default().split(16).unwrap(), (4, 4));
        assert_eq!(ExtendConfig::default().split(3).unwrap(), (1, 1));
        assert!(ExtendConfig::default().split(2).is_err());
    }
}
