//! Command-line surface: dataset generation, imbalance stats, training,
//! prediction, evaluation, and gradient verification.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::dataset::{load_dataset, slices_from_volumes};
use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::metrics::ClassWeights;
use crate::nifti::{assemble_volume, axial_slices, read_nifti, write_nifti, Datatype};
use crate::phantom::{generate_dataset, DatasetManifest, PhantomConfig};
use crate::preprocess::{
    fit_roi_window, imbalance_report, select_ci_slices, ImbalanceStats, RoiWindow, ROI_COLS,
    ROI_ROWS,
};
use crate::train::{evaluate_masks, kfold_cross_validate, FoldReport, TrainConfig};
use crate::unet::{UNet, UNetConfig};
use crate::verify::run_gradcheck;

pub const WORKERS_ENV: &str = "CLAUSTRUM_SEG_WORKERS";
/// Test-only hook: when set to `1`, `gradcheck` appends a deliberately
/// broken check so the failure path (nonzero exit) can be exercised.
pub const INJECT_BUG_ENV: &str = "CLAUSTRUM_SEG_INJECT_GRADCHECK_BUG";

#[derive(Parser, Debug)]
#[command(
    name = "claustrum-seg",
    version,
    about = "Slice-wise claustrum segmentation: phantom data, U-Net training, Dice/ICC evaluation"
)]
pub struct Cli {
    /// Worker threads for parallel sections (default: env CLAUSTRUM_SEG_WORKERS, else all cores)
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic labeled dataset
    Phantom(PhantomArgs),
    /// Report class imbalance before/after the ROI crop
    Stats(StatsArgs),
    /// K-fold cross-validated training
    Train(TrainArgs),
    /// Segment one NIfTI volume with a trained fold
    Predict(PredictArgs),
    /// Score predictions against labels (Dice, ICC, overlays)
    Evaluate(EvaluateArgs),
    /// Finite-difference verification of all gradients
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub subjects: usize,
    #[arg(long, default_value_t = 8)]
    pub slices: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file with a full phantom config (flags above override it)
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Dataset directory (with manifest.json)
    #[arg(long)]
    pub data: PathBuf,
    /// Print JSON only (no table)
    #[arg(long)]
    pub json: bool,
    /// Margin around the label bounding box when fitting the ROI window
    #[arg(long, default_value_t = 4)]
    pub margin: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (with manifest.json)
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, reports and the run manifest
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file: {"unet": {...}, "train": {...}, "augment": {...}}, all sections optional
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Training output directory (holds run_manifest.json and checkpoints)
    #[arg(long)]
    pub run: PathBuf,
    /// Which trained fold to use
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Input NIfTI volume
    #[arg(long)]
    pub input: PathBuf,
    /// Output mask NIfTI path
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Labeled dataset directory (with manifest.json)
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding `<subject>_pred.nii.gz` mask volumes
    #[arg(long)]
    pub predictions: PathBuf,
    /// Write the metrics JSON here (also printed to stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for overlay PNGs (truth green, prediction red)
    #[arg(long)]
    pub overlay_dir: Option<PathBuf>,
    /// Comma-separated slice indices to render (default: all CI slices)
    #[arg(long, value_delimiter = ',')]
    pub overlay_slices: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Check a single op by name instead of the whole suite
    #[arg(long)]
    pub op: Option<String>,
}

/// Everything needed to reproduce a training run on one worker
/// configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub phantom: Option<PhantomConfig>,
    pub fold_assignments: Vec<Vec<String>>,
    pub folds: Vec<FoldArtifacts>,
    /// file name -> SHA-256 of every input volume
    pub input_fingerprints: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldArtifacts {
    pub fold_index: usize,
    pub checkpoint: String,
    pub roi_window: RoiWindow,
    pub class_weights: ClassWeights,
    pub report: FoldReport,
}

impl RunManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join("run_manifest.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Section-wise training configuration file; absent sections use defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    #[serde(default)]
    pub unet: Option<UNetConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json_atomic<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(value)?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, &json).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    let digest = h.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn configure_workers(workers: Option<usize>) -> Result<()> {
    let n = match workers {
        Some(n) => Some(n),
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => Some(v.parse::<usize>().map_err(|_| {
                Error::Config(format!("{WORKERS_ENV} must be a positive integer, got '{v}'"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("worker count must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

pub fn cmd_phantom(args: &PhantomArgs) -> Result<()> {
    let mut config: PhantomConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => PhantomConfig::default(),
    };
    config.n_subjects = args.subjects;
    config.slices_per_subject = args.slices;
    config.seed = args.seed;
    let manifest = generate_dataset(&config, &args.out)?;
    println!(
        "wrote {} subjects ({} files) to {}",
        manifest.subjects.len(),
        manifest.subjects.len() * 2 + 1,
        args.out.display()
    );
    Ok(())
}

fn print_stats_table(stats: &ImbalanceStats) {
    println!(
        "{:<12} {:>6} {:>10} {:>10} {:>9} {:>9}",
        "subject", "slice", "CI before", "bg before", "CI after", "bg after"
    );
    for s in &stats.slices {
        println!(
            "{:<12} {:>6} {:>10} {:>10} {:>9} {:>9}",
            s.subject_id, s.slice_index, s.ci_before, s.bg_before, s.ci_after, s.bg_after
        );
    }
    println!(
        "foreground fraction: {:.4}% before ROI, {:.4}% after; background reduced {:.1}x",
        stats.foreground_fraction_before * 100.0,
        stats.foreground_fraction_after * 100.0,
        stats.background_reduction_factor
    );
}

pub fn cmd_stats(args: &StatsArgs) -> Result<ImbalanceStats> {
    let subjects = load_dataset(&args.data)?;
    let all: Vec<_> = subjects.into_iter().flat_map(|s| s.slices).collect();
    let ci = select_ci_slices(all)?;
    let stats = if ci.is_empty() {
        ImbalanceStats {
            slices: Vec::new(),
            foreground_fraction_before: 0.0,
            foreground_fraction_after: 0.0,
            background_reduction_factor: f64::NAN,
        }
    } else {
        let labels: Vec<Grid2> = ci.iter().map(|s| s.label.clone().unwrap()).collect();
        let window = fit_roi_window(&labels, args.margin)?;
        imbalance_report(&ci, window)?
    };
    if !args.json {
        print_stats_table(&stats);
    }
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(stats)
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest> {
    let file: TrainFileConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => TrainFileConfig::default(),
    };
    let mut unet = file.unet.unwrap_or_default();
    let mut train = file.train.unwrap_or_default();
    let mut augment = file.augment.unwrap_or_default();
    if let Some(k) = args.folds {
        train.k_folds = k;
    }
    if let Some(seed) = args.seed {
        train.seed = seed;
        unet.seed = seed;
        augment.seed = seed;
    }
    if let Some(c) = args.base_channels {
        unet.base_channels = c;
    }
    if let Some(e) = args.max_epochs {
        train.max_epochs = e;
    }
    unet.validate().map_err(|e| Error::Config(format!("unet: {e}")))?;
    train.validate().map_err(|e| Error::Config(format!("train: {e}")))?;

    let dataset_manifest = DatasetManifest::load(&args.data)?;
    let mut fingerprints = BTreeMap::new();
    for entry in &dataset_manifest.subjects {
        for name in [&entry.image, &entry.label] {
            fingerprints.insert(name.clone(), sha256_file(&args.data.join(name))?);
        }
    }
    let subjects = load_dataset(&args.data)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let cv = kfold_cross_validate(&subjects, &unet, &train, &augment)?;

    let mut folds = Vec::with_capacity(cv.folds.len());
    for fold in &cv.folds {
        let name = format!("fold-{}.ckpt", fold.report.fold_index);
        fold.model.save_checkpoint(args.out.join(&name))?;
        println!(
            "fold {}: Dice {:.4} ({} epochs, {:?})",
            fold.report.fold_index,
            fold.report.mean_dice,
            fold.report.epochs_trained,
            fold.report.stop_reason
        );
        folds.push(FoldArtifacts {
            fold_index: fold.report.fold_index,
            checkpoint: name,
            roi_window: fold.window,
            class_weights: fold.weights.clone(),
            report: fold.report.clone(),
        });
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: train.seed,
        unet,
        train,
        augment,
        phantom: Some(dataset_manifest.config.clone()),
        fold_assignments: cv.fold_assignments.clone(),
        folds,
        input_fingerprints: fingerprints,
    };
    write_json_atomic(&manifest, &args.out.join("run_manifest.json"))?;
    write_json_atomic(
        &serde_json::json!({
            "aggregate_dice": cv.aggregate_dice,
            "folds": manifest.folds.iter().map(|f| &f.report).collect::<Vec<_>>(),
        }),
        &args.out.join("report.json"),
    )?;
    println!("aggregate dice per case: {:.4}", cv.aggregate_dice);
    Ok(manifest)
}

fn resize_mask_nearest(mask: &Grid2, rows: usize, cols: usize) -> Grid2 {
    if mask.rows == rows && mask.cols == cols {
        return mask.clone();
    }
    let mut out = Grid2::zeros(rows, cols);
    let sr = mask.rows as f32 / rows as f32;
    let sc = mask.cols as f32 / cols as f32;
    for r in 0..rows {
        let src_r = ((r as f32 + 0.5) * sr - 0.5).clamp(0.0, mask.rows as f32 - 1.0);
        for c in 0..cols {
            let src_c = ((c as f32 + 0.5) * sc - 0.5).clamp(0.0, mask.cols as f32 - 1.0);
            out.set(r, c, mask.sample_nearest(src_r, src_c));
        }
    }
    out
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let manifest = RunManifest::load(&args.run)?;
    let fold = manifest
        .folds
        .iter()
        .find(|f| f.fold_index == args.fold)
        .ok_or_else(|| {
            Error::Config(format!(
                "run has no fold {} (available: 0..{})",
                args.fold,
                manifest.folds.len().saturating_sub(1)
            ))
        })?;
    let mut model = UNet::load_checkpoint(args.run.join(&fold.checkpoint))?;
    let window = fold.roi_window;
    let threshold = manifest.train.threshold;

    let input = read_nifti(&args.input)?;
    let slices = slices_from_volumes("input", &input, None)?;
    let mut mask_slices = Vec::with_capacity(slices.len());
    for s in &slices {
        let roi = crate::preprocess::crop_roi(s, window)?;
        let mask = model.predict_mask(&roi.image.data, [1, 1, ROI_ROWS, ROI_COLS], threshold)?;
        let mask = Grid2::from_vec(ROI_ROWS, ROI_COLS, mask);
        let restored = crate::preprocess::restore_from_roi(&mask, window)?;
        let (orig_r, orig_c) = s
            .provenance
            .original_shape
            .unwrap_or((restored.rows, restored.cols));
        mask_slices.push(resize_mask_nearest(&restored, orig_r, orig_c));
    }
    let volume = assemble_volume(&mask_slices, &input)?;
    if let Some(parent) = args.output.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    write_nifti(&volume, &args.output, Datatype::Uint8)?;
    println!(
        "wrote mask {} ({} foreground voxels)",
        args.output.display(),
        volume.data.iter().filter(|&&v| v != 0.0).count()
    );
    Ok(())
}

/// Grayscale slice with ground truth tinted green and prediction tinted red;
/// agreement shows as yellow.
fn render_overlay(image: &Grid2, truth: &Grid2, pred: &Grid2) -> image::RgbImage {
    let mut out = image::RgbImage::new(image.cols as u32, image.rows as u32);
    let lo = image.data.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = image.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    for r in 0..image.rows {
        for c in 0..image.cols {
            let g = (((image.at(r, c) - lo) / range) * 255.0).clamp(0.0, 255.0) as u8;
            let mut px = [g, g, g];
            if truth.at(r, c) != 0.0 {
                px[1] = 255;
            }
            if pred.at(r, c) != 0.0 {
                px[0] = 255;
            }
            out.put_pixel(c as u32, r as u32, image::Rgb(px));
        }
    }
    out
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let dataset_manifest = DatasetManifest::load(&args.data)?;
    let mut pairs = Vec::new();
    let mut overlay_inputs = Vec::new();
    for entry in &dataset_manifest.subjects {
        let label = read_nifti(args.data.join(&entry.label))?;
        let pred_path = args.predictions.join(format!("{}_pred.nii.gz", entry.id));
        let pred = read_nifti(&pred_path)?;
        if pred.dims != label.dims {
            return Err(Error::ShapeMismatch {
                expected: format!("{} prediction dims {:?}", entry.id, label.dims),
                found: format!("{:?}", pred.dims),
            });
        }
        let truth_slices = axial_slices(&label);
        let pred_slices = axial_slices(&pred);
        if args.overlay_dir.is_some() {
            let image = read_nifti(args.data.join(&entry.image))?;
            overlay_inputs.push((entry.id.clone(), axial_slices(&image)));
        }
        pairs.push((entry.id.clone(), pred_slices, truth_slices));
    }
    let report = evaluate_masks(&pairs)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(out) = &args.out {
        write_json_atomic(&report, out)?;
    }
    if let Some(dir) = &args.overlay_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for ((id, pred_slices, truth_slices), (_, image_slices)) in
            pairs.iter().zip(&overlay_inputs)
        {
            for (k, ((p, t), img)) in pred_slices
                .iter()
                .zip(truth_slices)
                .zip(image_slices)
                .enumerate()
            {
                let wanted = args.overlay_slices.is_empty() && t.count_nonzero() > 0
                    || args.overlay_slices.contains(&k);
                if !wanted {
                    continue;
                }
                let png = render_overlay(img, t, p);
                let path = dir.join(format!("{id}_slice{k:03}.png"));
                png.save(&path)
                    .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
            }
        }
    }
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let inject = std::env::var(INJECT_BUG_ENV).map(|v| v == "1").unwrap_or(false);
    let reports = run_gradcheck(args.op.as_deref(), inject)?;
    let mut all_pass = true;
    for r in &reports {
        println!("{r}");
        all_pass &= r.pass;
    }
    Ok(all_pass)
}

/// Run one parsed command; `Ok(exit_code)`.
pub fn run(cli: &Cli) -> Result<i32> {
    configure_workers(cli.workers)?;
    match &cli.command {
        Command::Phantom(a) => cmd_phantom(a).map(|()| 0),
        Command::Stats(a) => cmd_stats(a).map(|_| 0),
        Command::Train(a) => cmd_train(a).map(|_| 0),
        Command::Predict(a) => cmd_predict(a).map(|()| 0),
        Command::Evaluate(a) => cmd_evaluate(a).map(|()| 0),
        Command::Gradcheck(a) => cmd_gradcheck(a).map(|pass| if pass { 0 } else { 1 }),
    }
}

/// Exit code for a failed run: 2 for usage/config problems, 1 otherwise.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nifti::NiftiHeader;
    use crate::phantom::SubjectEntry;
    use crate::preprocess::{FRAME_COLS, FRAME_ROWS};

    #[test]
    fn exit_codes_distinguish_config_from_runtime() {
        assert_eq!(exit_code_for(&Error::Config("bad".into())), 2);
        assert_eq!(
            exit_code_for(&Error::io(
                "x",
                std::io::Error::new(std::io::ErrorKind::NotFound, "gone")
            )),
            1
        );
        assert_eq!(exit_code_for(&Error::Invalid("bad input".into())), 1);
    }

    #[test]
    fn train_config_file_rejects_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, br#"{"trian": {"learning_rate": 0.1}}"#).unwrap();
        let err = read_json::<TrainFileConfig>(&path).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("trian"), "{err}");
    }

    #[test]
    fn stats_on_empty_labels_reports_zero_foreground() {
        let dir = tempfile::tempdir().unwrap();
        let dims = [FRAME_ROWS, FRAME_COLS, 2];
        let header = NiftiHeader::canonical(dims, Datatype::Float32);
        let zeros =
            crate::nifti::Volume::new(vec![0.0; dims[0] * dims[1] * dims[2]], dims, header);
        write_nifti(&zeros, dir.path().join("s_img.nii.gz"), Datatype::Float32).unwrap();
        write_nifti(&zeros, dir.path().join("s_lbl.nii.gz"), Datatype::Uint8).unwrap();
        let manifest = DatasetManifest {
            seed: 0,
            config: PhantomConfig::default(),
            subjects: vec![SubjectEntry {
                id: "s".into(),
                image: "s_img.nii.gz".into(),
                label: "s_lbl.nii.gz".into(),
                boundary_fraction: 0.0,
            }],
        };
        std::fs::write(
            dir.path().join("manifest.json"),
            serde_json::to_vec(&manifest).unwrap(),
        )
        .unwrap();
        let stats = cmd_stats(&StatsArgs {
            data: dir.path().to_path_buf(),
            json: true,
            margin: 4,
        })
        .unwrap();
        assert!(stats.slices.is_empty());
        assert_eq!(stats.foreground_fraction_before, 0.0);
        assert_eq!(stats.foreground_fraction_after, 0.0);
    }
}
