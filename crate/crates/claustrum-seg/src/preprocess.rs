//! Slice-wise preprocessing: resize to 256x256, binarize labels, min-max
//! normalization, CI-slice selection, the 64x112 ROI crop, and restoration
//! of predictions to the full frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2;

pub const FRAME_ROWS: usize = 256;
pub const FRAME_COLS: usize = 256;
pub const ROI_ROWS: usize = 64;
pub const ROI_COLS: usize = 112;

/// What happened to a slice on its way through the pipeline.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub original_shape: Option<(usize, usize)>,
    pub roi_window: Option<RoiWindow>,
    pub augmented: bool,
}

/// One axial slice with optional binary label and subject identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceSample {
    pub subject_id: String,
    pub slice_index: usize,
    pub image: Grid2,
    pub label: Option<Grid2>,
    pub provenance: Provenance,
}

impl SliceSample {
    pub fn new(subject_id: impl Into<String>, slice_index: usize, image: Grid2) -> Self {
        SliceSample {
            subject_id: subject_id.into(),
            slice_index,
            image,
            label: None,
            provenance: Provenance::default(),
        }
    }

    pub fn with_label(mut self, label: Grid2) -> Self {
        assert_eq!(
            (label.rows, label.cols),
            (self.image.rows, self.image.cols),
            "label shape must match image"
        );
        self.label = Some(label);
        self
    }
}

/// Fixed-size 64x112 crop window inside the 256x256 frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiWindow {
    pub row0: usize,
    pub col0: usize,
}

impl RoiWindow {
    pub fn new(row0: usize, col0: usize) -> Result<Self> {
        if row0 + ROI_ROWS > FRAME_ROWS || col0 + ROI_COLS > FRAME_COLS {
            return Err(Error::Invalid(format!(
                "ROI window at ({row0},{col0}) exceeds the {FRAME_ROWS}x{FRAME_COLS} frame"
            )));
        }
        Ok(RoiWindow { row0, col0 })
    }

    pub fn contains_all(&self, label: &Grid2) -> bool {
        for r in 0..label.rows {
            for c in 0..label.cols {
                if label.at(r, c) != 0.0
                    && !(r >= self.row0
                        && r < self.row0 + ROI_ROWS
                        && c >= self.col0
                        && c < self.col0 + ROI_COLS)
                {
                    return false;
                }
            }
        }
        true
    }
}

fn binarize(g: &mut Grid2) {
    for v in g.data.iter_mut() {
        *v = if *v > 0.0 { 1.0 } else { 0.0 };
    }
}

fn resize_grid(g: &Grid2, rows: usize, cols: usize, nearest: bool) -> Grid2 {
    if g.rows == rows && g.cols == cols {
        return g.clone();
    }
    let mut out = Grid2::zeros(rows, cols);
    let sr = g.rows as f32 / rows as f32;
    let sc = g.cols as f32 / cols as f32;
    for r in 0..rows {
        let src_r = ((r as f32 + 0.5) * sr - 0.5).clamp(0.0, g.rows as f32 - 1.0);
        for c in 0..cols {
            let src_c = ((c as f32 + 0.5) * sc - 0.5).clamp(0.0, g.cols as f32 - 1.0);
            let v = if nearest {
                g.sample_nearest(src_r, src_c)
            } else {
                g.sample_bilinear(src_r, src_c)
            };
            out.set(r, c, v);
        }
    }
    out
}

/// Resize to the 256x256 frame: bilinear for the image, nearest-neighbor for
/// the label (re-binarized).
pub fn resize_slice(sample: &SliceSample) -> Result<SliceSample> {
    if sample.image.is_empty() {
        return Err(Error::Invalid("resize_slice on empty image".into()));
    }
    let mut out = sample.clone();
    out.provenance.original_shape = Some((sample.image.rows, sample.image.cols));
    out.image = resize_grid(&sample.image, FRAME_ROWS, FRAME_COLS, false);
    if let Some(l) = &sample.label {
        let mut rl = resize_grid(l, FRAME_ROWS, FRAME_COLS, true);
        binarize(&mut rl);
        out.label = Some(rl);
    }
    Ok(out)
}

/// Per-volume min-max normalization of slice images to [0,1].
///
/// A constant volume maps to all zeros.
pub fn normalize_volume(samples: &mut [SliceSample]) -> Result<()> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for s in samples.iter() {
        for &v in &s.image.data {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !lo.is_finite() {
        return Err(Error::NonFinite("volume has no finite voxels".into()));
    }
    let range = hi - lo;
    for s in samples.iter_mut() {
        for v in s.image.data.iter_mut() {
            *v = if range == 0.0 { 0.0 } else { (*v - lo) / range };
        }
    }
    Ok(())
}

/// Keep only slices whose label contains at least one CI pixel.
pub fn select_ci_slices(samples: Vec<SliceSample>) -> Result<Vec<SliceSample>> {
    if samples.iter().any(|s| s.label.is_none()) {
        return Err(Error::Invalid("select_ci_slices requires labels".into()));
    }
    Ok(samples
        .into_iter()
        .filter(|s| s.label.as_ref().unwrap().count_nonzero() > 0)
        .collect())
}

/// Cut the 64x112 ROI out of a 256x256 slice (label cropped identically).
pub fn crop_roi(sample: &SliceSample, window: RoiWindow) -> Result<SliceSample> {
    if sample.image.rows != FRAME_ROWS || sample.image.cols != FRAME_COLS {
        return Err(Error::ShapeMismatch {
            expected: format!("{FRAME_ROWS}x{FRAME_COLS}"),
            found: format!("{}x{}", sample.image.rows, sample.image.cols),
        });
    }
    let crop = |g: &Grid2| {
        let mut out = Grid2::zeros(ROI_ROWS, ROI_COLS);
        for r in 0..ROI_ROWS {
            for c in 0..ROI_COLS {
                out.set(r, c, g.at(window.row0 + r, window.col0 + c));
            }
        }
        out
    };
    let mut out = sample.clone();
    out.image = crop(&sample.image);
    out.label = sample.label.as_ref().map(crop);
    out.provenance.roi_window = Some(window);
    Ok(out)
}

/// Paste a 64x112 mask back into a zero 256x256 frame at `window`.
pub fn restore_from_roi(mask: &Grid2, window: RoiWindow) -> Result<Grid2> {
    if mask.rows != ROI_ROWS || mask.cols != ROI_COLS {
        return Err(Error::ShapeMismatch {
            expected: format!("{ROI_ROWS}x{ROI_COLS}"),
            found: format!("{}x{}", mask.rows, mask.cols),
        });
    }
    let mut out = Grid2::zeros(FRAME_ROWS, FRAME_COLS);
    for r in 0..ROI_ROWS {
        for c in 0..ROI_COLS {
            out.set(window.row0 + r, window.col0 + c, mask.at(r, c));
        }
    }
    Ok(out)
}

/// Fit a 64x112 window around the union bounding box of all training labels,
/// centered on the union centroid and clamped in-bounds.
pub fn fit_roi_window(labels: &[Grid2], margin: usize) -> Result<RoiWindow> {
    let mut rmin = usize::MAX;
    let mut rmax = 0usize;
    let mut cmin = usize::MAX;
    let mut cmax = 0usize;
    let mut rsum = 0.0f64;
    let mut csum = 0.0f64;
    let mut count = 0u64;
    for l in labels {
        for r in 0..l.rows {
            for c in 0..l.cols {
                if l.at(r, c) != 0.0 {
                    rmin = rmin.min(r);
                    rmax = rmax.max(r);
                    cmin = cmin.min(c);
                    cmax = cmax.max(c);
                    rsum += r as f64;
                    csum += c as f64;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Invalid("fit_roi_window: no CI pixels in labels".into()));
    }
    let box_rows = rmax - rmin + 1 + 2 * margin;
    let box_cols = cmax - cmin + 1 + 2 * margin;
    if box_rows > ROI_ROWS || box_cols > ROI_COLS {
        return Err(Error::Invalid(format!(
            "CI extent {box_rows}x{box_cols} (with margin {margin}) exceeds the {ROI_ROWS}x{ROI_COLS} window"
        )));
    }
    let centroid_r = rsum / count as f64;
    let centroid_c = csum / count as f64;
    // center on the centroid, then shift to cover the box and stay in-frame
    let clamp_start = |center: f64, half: usize, lo_req: usize, hi_req: usize, span: usize, frame: usize| {
        let mut start = (center - half as f64).round() as i64;
        start = start.max(hi_req as i64 + 1 - span as i64); // cover right/bottom edge
        start = start.min(lo_req as i64); // cover left/top edge
        start.clamp(0, (frame - span) as i64) as usize
    };
    let row0 = clamp_start(
        centroid_r,
        ROI_ROWS / 2,
        rmin.saturating_sub(margin),
        (rmax + margin).min(FRAME_ROWS - 1),
        ROI_ROWS,
        FRAME_ROWS,
    );
    let col0 = clamp_start(
        centroid_c,
        ROI_COLS / 2,
        cmin.saturating_sub(margin),
        (cmax + margin).min(FRAME_COLS - 1),
        ROI_COLS,
        FRAME_COLS,
    );
    RoiWindow::new(row0, col0)
}

/// Per-slice pixel counts before and after the ROI crop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceCounts {
    pub subject_id: String,
    pub slice_index: usize,
    pub ci_before: u64,
    pub bg_before: u64,
    pub ci_after: u64,
    pub bg_after: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImbalanceStats {
    pub slices: Vec<SliceCounts>,
    pub foreground_fraction_before: f64,
    pub foreground_fraction_after: f64,
    pub background_reduction_factor: f64,
}

/// Count CI/background pixels per slice, full-frame and inside `window`.
pub fn imbalance_report(samples: &[SliceSample], window: RoiWindow) -> Result<ImbalanceStats> {
    let mut slices = Vec::with_capacity(samples.len());
    let mut ci_b = 0u64;
    let mut tot_b = 0u64;
    let mut ci_a = 0u64;
    let mut tot_a = 0u64;
    for s in samples {
        let label = s
            .label
            .as_ref()
            .ok_or_else(|| Error::Invalid("imbalance_report requires labels".into()))?;
        let before = label.count_nonzero() as u64;
        let total_before = label.len() as u64;
        let cropped = crop_roi(s, window)?;
        let after = cropped.label.as_ref().unwrap().count_nonzero() as u64;
        let total_after = (ROI_ROWS * ROI_COLS) as u64;
        slices.push(SliceCounts {
            subject_id: s.subject_id.clone(),
            slice_index: s.slice_index,
            ci_before: before,
            bg_before: total_before - before,
            ci_after: after,
            bg_after: total_after - after,
        });
        ci_b += before;
        tot_b += total_before;
        ci_a += after;
        tot_a += total_after;
    }
    let bg_b = (tot_b - ci_b) as f64;
    let bg_a = (tot_a - ci_a) as f64;
    Ok(ImbalanceStats {
        slices,
        foreground_fraction_before: if tot_b == 0 { 0.0 } else { ci_b as f64 / tot_b as f64 },
        foreground_fraction_after: if tot_a == 0 { 0.0 } else { ci_a as f64 / tot_a as f64 },
        background_reduction_factor: if bg_a == 0.0 { f64::NAN } else { bg_b / bg_a },
    })
}
