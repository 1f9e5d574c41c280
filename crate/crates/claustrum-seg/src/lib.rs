//! Claustrum segmentation toolkit.
//!
//! End-to-end pipeline for slice-wise claustrum segmentation: NIfTI-1 volume
//! I/O, ROI-based preprocessing, augmentation, a 4-level U-Net trained with
//! class-weighted binary cross-entropy under 5-fold cross-validation, and
//! Dice/ICC evaluation. A synthetic phantom generator makes the whole
//! pipeline verifiable without clinical data.

pub mod augment;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod preprocess;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod verify;

pub use error::{Error, Result};
