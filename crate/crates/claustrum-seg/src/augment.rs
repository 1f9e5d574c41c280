//! Training-set expansion: elastic deformation, affine transforms, and
//! intensity rescaling. Variants are fully determined by (seed, sample
//! identity, copy index) so parallel and serial augmentation agree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::preprocess::SliceSample;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub elastic_alpha: f32,
    pub elastic_sigma: f32,
    pub max_rotation_deg: f32,
    pub max_translation_px: f32,
    pub max_scale_delta: f32,
    pub intensity_gain_range: (f32, f32),
    pub intensity_bias_range: (f32, f32),
    pub copies_per_sample: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            elastic_alpha: 8.0,
            elastic_sigma: 4.0,
            max_rotation_deg: 10.0,
            max_translation_px: 5.0,
            max_scale_delta: 0.05,
            intensity_gain_range: (0.9, 1.1),
            intensity_bias_range: (-0.05, 0.05),
            copies_per_sample: 4,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.elastic_sigma <= 0.0 {
            return Err(Error::Config("elastic_sigma must be > 0".into()));
        }
        if self.intensity_gain_range.0 <= 0.0 {
            return Err(Error::Config("intensity gain must be > 0".into()));
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_smooth(field: &Grid2, sigma: f32) -> Grid2 {
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as i64;
    let mut tmp = Grid2::zeros(field.rows, field.cols);
    for r in 0..field.rows {
        for c in 0..field.cols {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let cc = (c as i64 + i as i64 - radius).clamp(0, field.cols as i64 - 1) as usize;
                acc += kv * field.at(r, cc);
            }
            tmp.set(r, c, acc);
        }
    }
    let mut out = Grid2::zeros(field.rows, field.cols);
    for r in 0..field.rows {
        for c in 0..field.cols {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let rr = (r as i64 + i as i64 - radius).clamp(0, field.rows as i64 - 1) as usize;
                acc += kv * tmp.at(rr, c);
            }
            out.set(r, c, acc);
        }
    }
    out
}

fn binarize(g: &mut Grid2) {
    for v in g.data.iter_mut() {
        *v = if *v > 0.5 { 1.0 } else { 0.0 };
    }
}

fn warp(
    image: &Grid2,
    label: Option<&Grid2>,
    src_coords: impl Fn(usize, usize) -> (f32, f32),
) -> (Grid2, Option<Grid2>) {
    let mut img_out = Grid2::zeros(image.rows, image.cols);
    let mut lbl_out = label.map(|l| Grid2::zeros(l.rows, l.cols));
    for r in 0..image.rows {
        for c in 0..image.cols {
            let (sr, sc) = src_coords(r, c);
            img_out.set(r, c, image.sample_bilinear(sr, sc));
            if let (Some(l), Some(lo)) = (label, lbl_out.as_mut()) {
                lo.set(r, c, l.sample_nearest(sr, sc));
            }
        }
    }
    if let Some(lo) = lbl_out.as_mut() {
        binarize(lo);
    }
    (img_out, lbl_out)
}

/// Warp by a smoothed random displacement field.
///
/// Per-pixel displacements drawn uniform in [-1,1]^2, Gaussian-smoothed with
/// std `sigma`, scaled by `alpha`. Bilinear image sampling, nearest for the
/// label, zeros outside the frame.
pub fn elastic_deform(
    sample: &SliceSample,
    alpha: f32,
    sigma: f32,
    rng: &mut ChaCha8Rng,
) -> Result<SliceSample> {
    if alpha < 0.0 {
        return Err(Error::Invalid("elastic alpha must be >= 0".into()));
    }
    let (rows, cols) = (sample.image.rows, sample.image.cols);
    let mut dr = Grid2::zeros(rows, cols);
    let mut dc = Grid2::zeros(rows, cols);
    for v in dr.data.iter_mut() {
        *v = rng.gen_range(-1.0..=1.0);
    }
    for v in dc.data.iter_mut() {
        *v = rng.gen_range(-1.0..=1.0);
    }
    if alpha == 0.0 {
        return Ok(sample.clone());
    }
    let dr = gaussian_smooth(&dr, sigma);
    let dc = gaussian_smooth(&dc, sigma);
    let (image, label) = warp(&sample.image, sample.label.as_ref(), |r, c| {
        (
            r as f32 + alpha * dr.at(r, c),
            c as f32 + alpha * dc.at(r, c),
        )
    });
    let mut out = sample.clone();
    out.image = image;
    out.label = label;
    Ok(out)
}

/// Rotation about the image center, then scale, then translation.
pub fn affine_transform(
    sample: &SliceSample,
    rotation_deg: f32,
    translation: (f32, f32),
    scale: f32,
) -> Result<SliceSample> {
    if scale <= 0.0 {
        return Err(Error::Invalid("affine scale must be > 0".into()));
    }
    let (rows, cols) = (sample.image.rows, sample.image.cols);
    let cr = (rows as f32 - 1.0) / 2.0;
    let cc = (cols as f32 - 1.0) / 2.0;
    let theta = rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    // inverse map: undo translation, unscale, unrotate
    let (image, label) = warp(&sample.image, sample.label.as_ref(), |r, c| {
        let y = (r as f32 - cr - translation.0) / scale;
        let x = (c as f32 - cc - translation.1) / scale;
        (cr + cos * y + sin * x, cc - sin * y + cos * x)
    });
    let mut out = sample.clone();
    out.image = image;
    out.label = label;
    Ok(out)
}

/// image' = clamp(gain * image + bias, 0, 1); the label is untouched.
pub fn intensity_rescale(sample: &SliceSample, gain: f32, bias: f32) -> Result<SliceSample> {
    if gain <= 0.0 {
        return Err(Error::Invalid("intensity gain must be > 0".into()));
    }
    let mut out = sample.clone();
    for v in out.image.data.iter_mut() {
        *v = (gain * *v + bias).clamp(0.0, 1.0);
    }
    Ok(out)
}

fn variant_rng(config: &AugmentConfig, sample: &SliceSample, copy: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(config.seed.to_le_bytes());
    h.update(sample.subject_id.as_bytes());
    h.update(sample.slice_index.to_le_bytes());
    h.update(copy.to_le_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 8];
    seed.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(seed))
}

fn make_variant(sample: &SliceSample, config: &AugmentConfig, copy: usize) -> Result<SliceSample> {
    let mut rng = variant_rng(config, sample, copy);
    let s = elastic_deform(sample, config.elastic_alpha, config.elastic_sigma, &mut rng)?;
    let rot = rng.gen_range(-config.max_rotation_deg..=config.max_rotation_deg);
    let tr = rng.gen_range(-config.max_translation_px..=config.max_translation_px);
    let tc = rng.gen_range(-config.max_translation_px..=config.max_translation_px);
    let scale = 1.0 + rng.gen_range(-config.max_scale_delta..=config.max_scale_delta);
    let s = affine_transform(&s, rot, (tr, tc), scale)?;
    let gain = rng.gen_range(config.intensity_gain_range.0..=config.intensity_gain_range.1);
    let bias = rng.gen_range(config.intensity_bias_range.0..=config.intensity_bias_range.1);
    let mut s = intensity_rescale(&s, gain, bias)?;
    s.provenance.augmented = true;
    Ok(s)
}

/// Originals followed by `copies_per_sample` stochastic variants per original.
pub fn augment_dataset(samples: &[SliceSample], config: &AugmentConfig) -> Result<Vec<SliceSample>> {
    config.validate()?;
    let mut out = samples.to_vec();
    let variants: Vec<SliceSample> = samples
        .par_iter()
        .flat_map_iter(|s| (0..config.copies_per_sample).map(move |c| (s, c)))
        .map(|(s, c)| make_variant(s, config, c))
        .collect::<Result<Vec<_>>>()?;
    out.extend(variants);
    Ok(out)
}
