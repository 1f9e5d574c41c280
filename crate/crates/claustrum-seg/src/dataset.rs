//! Loading labeled datasets from disk into frame-stage subjects: NIfTI read,
//! axial split, resize to 256x256, label binarization, per-volume
//! normalization.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nifti::{axial_slices, read_nifti, Volume};
use crate::phantom::DatasetManifest;
use crate::preprocess::{normalize_volume, resize_slice, SliceSample};
use crate::train::Subject;

/// Split a volume (and optional aligned label volume) into preprocessed
/// frame-stage slices.
pub fn slices_from_volumes(
    subject_id: &str,
    image: &Volume,
    label: Option<&Volume>,
) -> Result<Vec<SliceSample>> {
    if let Some(l) = label {
        if l.dims != image.dims {
            return Err(Error::ShapeMismatch {
                expected: format!("label dims {:?}", image.dims),
                found: format!("{:?}", l.dims),
            });
        }
    }
    let image_slices = axial_slices(image);
    let label_slices = label.map(axial_slices);
    let mut samples = Vec::with_capacity(image_slices.len());
    for (k, img) in image_slices.into_iter().enumerate() {
        let mut s = SliceSample::new(subject_id, k, img);
        if let Some(ls) = &label_slices {
            s = s.with_label(ls[k].clone());
        }
        samples.push(resize_slice(&s)?);
    }
    normalize_volume(&mut samples)?;
    Ok(samples)
}

/// Load one labeled subject from an image/label NIfTI pair.
pub fn load_subject(
    id: &str,
    image_path: impl AsRef<Path>,
    label_path: impl AsRef<Path>,
) -> Result<Subject> {
    let image = read_nifti(image_path)?;
    let label = read_nifti(label_path)?;
    Ok(Subject {
        id: id.to_string(),
        slices: slices_from_volumes(id, &image, Some(&label))?,
    })
}

/// Load every subject listed in a dataset directory's `manifest.json`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Subject>> {
    let dir = dir.as_ref();
    let manifest = DatasetManifest::load(dir)?;
    manifest
        .subjects
        .par_iter()
        .map(|e| load_subject(&e.id, dir.join(&e.image), dir.join(&e.label)))
        .collect()
}
