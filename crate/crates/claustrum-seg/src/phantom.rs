//! Synthetic benchmark data: thin curved "ribbon" foreground over a smooth
//! textured background, matching the class-imbalance regime of the real task
//! (~0.3% foreground full-frame, ~3% after a fitted 64x112 ROI) with exactly
//! known labels.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::nifti::{write_nifti, Datatype, NiftiHeader, Volume};
use crate::preprocess::{FRAME_COLS, FRAME_ROWS};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub n_subjects: usize,
    pub slices_per_subject: usize,
    /// Stroke half-width is thickness/2; sampled per subject.
    pub thickness_range: (f64, f64),
    /// Chord length of the ribbon's quadratic spline, in pixels.
    pub length_range: (f64, f64),
    /// Perpendicular offset of the spline control point, in pixels.
    pub curvature_range: (f64, f64),
    /// Per-subject offset of the ribbon locus from frame center, per axis.
    pub center_jitter_px: f64,
    /// Per-slice additional offset, per axis.
    pub slice_jitter_px: f64,
    /// Gaussian pixel noise on top of the smooth background field.
    pub texture_noise_std: f64,
    /// Added intensity of ribbon pixels over the local background.
    pub ribbon_contrast: f64,
    /// Fraction of slices (a centered contiguous band) carrying the ribbon.
    pub ribbon_slice_fraction: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_subjects: 30,
            slices_per_subject: 8,
            thickness_range: (2.0, 3.5),
            length_range: (70.0, 90.0),
            curvature_range: (8.0, 20.0),
            center_jitter_px: 6.0,
            slice_jitter_px: 2.0,
            texture_noise_std: 0.03,
            ribbon_contrast: 0.35,
            ribbon_slice_fraction: 0.75,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.slices_per_subject == 0 {
            return Err(Error::Config("n_subjects and slices_per_subject must be >= 1".into()));
        }
        if self.thickness_range.0 < 1.0 || self.thickness_range.1 < self.thickness_range.0 {
            return Err(Error::Config("thickness range must satisfy 1 <= lo <= hi".into()));
        }
        if self.length_range.1 < self.length_range.0 || self.length_range.0 <= 0.0 {
            return Err(Error::Config("length range must satisfy 0 < lo <= hi".into()));
        }
        if !(0.0..=1.0).contains(&self.ribbon_slice_fraction) {
            return Err(Error::Config("ribbon_slice_fraction must be in [0,1]".into()));
        }
        if self.length_range.1 + self.thickness_range.1 + 2.0 * self.slice_jitter_px > 104.0 {
            return Err(Error::Config(
                "ribbon length/thickness/jitter exceed the 64x112 ROI budget".into(),
            ));
        }
        Ok(())
    }
}

/// One generated subject: image volume, exact binary label volume, and the
/// fraction of foreground pixels lying on the mask boundary (reported to
/// characterize difficulty; thin structures are nearly all boundary).
pub struct PhantomSubject {
    pub image: Volume,
    pub label: Volume,
    pub boundary_fraction: f64,
}

fn subject_rng(seed: u64, subject_index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(b"phantom-subject");
    h.update((subject_index as u64).to_le_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 8];
    s.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(s))
}

/// Smooth background: coarse random lattice bilinearly upsampled, plus
/// per-pixel Gaussian noise.
fn background_texture(rng: &mut ChaCha8Rng, noise_std: f64) -> Grid2 {
    const LATTICE: usize = 16;
    let mut coarse = [[0.0f64; LATTICE + 1]; LATTICE + 1];
    for row in coarse.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(0.25..0.55);
        }
    }
    let noise = Normal::new(0.0, noise_std).expect("valid std");
    let mut g = Grid2::zeros(FRAME_ROWS, FRAME_COLS);
    let sr = LATTICE as f64 / FRAME_ROWS as f64;
    let sc = LATTICE as f64 / FRAME_COLS as f64;
    for r in 0..FRAME_ROWS {
        for c in 0..FRAME_COLS {
            let fr = r as f64 * sr;
            let fc = c as f64 * sc;
            let (r0, c0) = (fr.floor() as usize, fc.floor() as usize);
            let (dr, dc) = (fr - r0 as f64, fc - c0 as f64);
            let v = coarse[r0][c0] * (1.0 - dr) * (1.0 - dc)
                + coarse[r0 + 1][c0] * dr * (1.0 - dc)
                + coarse[r0][c0 + 1] * (1.0 - dr) * dc
                + coarse[r0 + 1][c0 + 1] * dr * dc;
            let v = (v + noise.sample(rng)).clamp(0.0, 1.0);
            g.set(r, c, v as f32);
        }
    }
    g
}

/// Geometry of one subject's ribbon, fixed across its slices up to jitter.
struct RibbonShape {
    /// Control points of the quadratic Bezier, relative to the ribbon center.
    p0: (f64, f64),
    p1: (f64, f64),
    p2: (f64, f64),
    half_width: f64,
}

fn sample_ribbon_shape(rng: &mut ChaCha8Rng, config: &PhantomConfig) -> RibbonShape {
    let length = rng.gen_range(config.length_range.0..=config.length_range.1);
    let curvature = rng.gen_range(config.curvature_range.0..=config.curvature_range.1);
    let thickness = rng.gen_range(config.thickness_range.0..=config.thickness_range.1);
    let angle = rng.gen_range(-10.0f64..=10.0).to_radians();
    let bend: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let (cos, sin) = (angle.cos(), angle.sin());
    let rotate = |x: f64, y: f64| (x * sin + y * cos, x * cos - y * sin);
    RibbonShape {
        p0: rotate(-length / 2.0, 0.0),
        p1: rotate(0.0, bend * curvature),
        p2: rotate(length / 2.0, 0.0),
        half_width: thickness / 2.0,
    }
}

/// Rasterize the stroked spline: a pixel is foreground iff its center lies
/// within half_width of the sampled curve.
fn rasterize_ribbon(shape: &RibbonShape, center: (f64, f64)) -> Grid2 {
    const SAMPLES: usize = 256;
    let mut points = Vec::with_capacity(SAMPLES + 1);
    for i in 0..=SAMPLES {
        let t = i as f64 / SAMPLES as f64;
        let u = 1.0 - t;
        let r = u * u * shape.p0.0 + 2.0 * u * t * shape.p1.0 + t * t * shape.p2.0 + center.0;
        let c = u * u * shape.p0.1 + 2.0 * u * t * shape.p1.1 + t * t * shape.p2.1 + center.1;
        points.push((r, c));
    }
    let pad = shape.half_width + 1.0;
    let r_lo = (points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min) - pad).max(0.0) as usize;
    let r_hi =
        (points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max) + pad).min((FRAME_ROWS - 1) as f64) as usize;
    let c_lo = (points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min) - pad).max(0.0) as usize;
    let c_hi =
        (points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max) + pad).min((FRAME_COLS - 1) as f64) as usize;
    let w2 = shape.half_width * shape.half_width;
    let mut mask = Grid2::zeros(FRAME_ROWS, FRAME_COLS);
    for r in r_lo..=r_hi {
        for c in c_lo..=c_hi {
            let (pr, pc) = (r as f64, c as f64);
            let inside = points.iter().any(|&(qr, qc)| {
                let (dr, dc) = (pr - qr, pc - qc);
                dr * dr + dc * dc <= w2
            });
            if inside {
                mask.set(r, c, 1.0);
            }
        }
    }
    mask
}

fn boundary_fraction(mask: &Grid2) -> f64 {
    let mut fg = 0u64;
    let mut boundary = 0u64;
    for r in 0..mask.rows {
        for c in 0..mask.cols {
            if mask.at(r, c) == 0.0 {
                continue;
            }
            fg += 1;
            let mut edge = false;
            if r == 0 || mask.at(r - 1, c) == 0.0 {
                edge = true;
            }
            if r + 1 == mask.rows || mask.at(r + 1, c) == 0.0 {
                edge = true;
            }
            if c == 0 || mask.at(r, c - 1) == 0.0 {
                edge = true;
            }
            if c + 1 == mask.cols || mask.at(r, c + 1) == 0.0 {
                edge = true;
            }
            if edge {
                boundary += 1;
            }
        }
    }
    if fg == 0 {
        0.0
    } else {
        boundary as f64 / fg as f64
    }
}

/// Indices of the centered contiguous band of slices that carry the ribbon.
fn ribbon_band(config: &PhantomConfig) -> std::ops::Range<usize> {
    let n = config.slices_per_subject;
    let k = ((n as f64 * config.ribbon_slice_fraction).round() as usize).clamp(1, n);
    let start = (n - k) / 2;
    start..start + k
}

/// Deterministic per (seed, subject_index); slices are 256x256 axial planes
/// stacked along the third axis, ribbon present in a mid-volume band.
pub fn generate_subject(config: &PhantomConfig, subject_index: usize) -> Result<PhantomSubject> {
    config.validate()?;
    let mut rng = subject_rng(config.seed, subject_index);
    let shape = sample_ribbon_shape(&mut rng, config);
    let base_center = (
        FRAME_ROWS as f64 / 2.0 + rng.gen_range(-config.center_jitter_px..=config.center_jitter_px),
        FRAME_COLS as f64 / 2.0 + rng.gen_range(-config.center_jitter_px..=config.center_jitter_px),
    );
    let band = ribbon_band(config);

    let mut image_slices = Vec::with_capacity(config.slices_per_subject);
    let mut label_slices = Vec::with_capacity(config.slices_per_subject);
    let mut fg = 0u64;
    let mut boundary_weighted = 0.0;
    for k in 0..config.slices_per_subject {
        let mut image = background_texture(&mut rng, config.texture_noise_std);
        let mut label = Grid2::zeros(FRAME_ROWS, FRAME_COLS);
        if band.contains(&k) {
            let center = (
                base_center.0 + rng.gen_range(-config.slice_jitter_px..=config.slice_jitter_px),
                base_center.1 + rng.gen_range(-config.slice_jitter_px..=config.slice_jitter_px),
            );
            label = rasterize_ribbon(&shape, center);
            for r in 0..FRAME_ROWS {
                for c in 0..FRAME_COLS {
                    if label.at(r, c) != 0.0 {
                        let v = image.at(r, c) + config.ribbon_contrast as f32;
                        image.set(r, c, v.clamp(0.0, 1.0));
                    }
                }
            }
            let n = label.count_nonzero() as u64;
            fg += n;
            boundary_weighted += boundary_fraction(&label) * n as f64;
        }
        image_slices.push(image);
        label_slices.push(label);
    }

    let dims = [FRAME_ROWS, FRAME_COLS, config.slices_per_subject];
    let header = NiftiHeader::canonical(dims, Datatype::Float32);
    let template = Volume::new(vec![0.0; dims[0] * dims[1] * dims[2]], dims, header);
    let image = crate::nifti::assemble_volume(&image_slices, &template)?;
    let label = crate::nifti::assemble_volume(&label_slices, &template)?;
    Ok(PhantomSubject {
        image,
        label,
        boundary_fraction: if fg == 0 { 0.0 } else { boundary_weighted / fg as f64 },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub image: String,
    pub label: String,
    pub boundary_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: PhantomConfig,
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join("manifest.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub fn subject_id(index: usize) -> String {
    format!("sub-{:03}", index + 1)
}

/// Generate and write the full dataset:
/// `<out>/sub-XXX_img.nii.gz`, `<out>/sub-XXX_lbl.nii.gz`, `manifest.json`.
/// Subjects are generated in parallel from independent derived RNG streams.
pub fn generate_dataset(config: &PhantomConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    config.validate()?;
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let entries: Vec<SubjectEntry> = (0..config.n_subjects)
        .into_par_iter()
        .map(|idx| -> Result<SubjectEntry> {
            let subject = generate_subject(config, idx)?;
            let id = subject_id(idx);
            let img_name = format!("{id}_img.nii.gz");
            let lbl_name = format!("{id}_lbl.nii.gz");
            write_nifti(&subject.image, out.join(&img_name), Datatype::Float32)?;
            write_nifti(&subject.label, out.join(&lbl_name), Datatype::Uint8)?;
            Ok(SubjectEntry {
                id,
                image: img_name,
                label: lbl_name,
                boundary_fraction: subject.boundary_fraction,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        seed: config.seed,
        config: config.clone(),
        subjects: entries,
    };
    let path = out.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest)?;
    let tmp: PathBuf = out.join("manifest.json.tmp");
    std::fs::write(&tmp, &json).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
