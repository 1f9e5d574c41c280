//! Optimization and the evaluation protocol: Adam with L2 on conv kernels,
//! early stopping on validation per-case Dice, and subject-level K-fold
//! cross-validation with augmentation applied to training folds only.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_dataset, AugmentConfig};
use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::metrics::{
    compute_class_weights, confusion, dice, icc, ClassWeights, ConfusionCounts, IccReport, BCE_EPS,
};
use crate::preprocess::{
    crop_roi, fit_roi_window, restore_from_roi, select_ci_slices, RoiWindow, SliceSample,
    ROI_COLS, ROI_ROWS,
};
use crate::tensor::{Mode, Tape};
use crate::unet::{build_model, UNet, UNetConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub k_folds: usize,
    pub roi_margin: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            l2_lambda: 1e-4,
            batch_size: 8,
            max_epochs: 100,
            patience: 10,
            k_folds: 5,
            roi_margin: 4,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must be in (0,1)".into()));
        }
        if self.k_folds < 2 {
            return Err(Error::Config("k_folds must be >= 2".into()));
        }
        if self.patience < 1 || self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::Config("patience/batch_size/max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// First/second moment estimates, one pair per parameter tensor.
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &UNet) -> Self {
        AdamState {
            m: model.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: model.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            step: 0,
        }
    }
}

/// One Adam update from the gradients currently stored in the model.
///
/// L2 is applied as a gradient addition g <- g + lambda * theta, to decayed
/// parameters (conv/transposed-conv kernels) only.
pub fn adam_step(model: &mut UNet, state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    for p in &model.params {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let b1 = config.adam_beta1;
    let b2 = config.adam_beta2;
    let bias1 = 1.0 - b1.powf(t);
    let bias2 = 1.0 - b2.powf(t);
    let lr = config.learning_rate;
    for (idx, p) in model.params.iter_mut().enumerate() {
        let lambda = if p.weight_decay { config.l2_lambda } else { 0.0 };
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for k in 0..p.value.len() {
            let g = p.grad[k] as f64 + lambda * p.value[k] as f64;
            m[k] = (b1 * m[k] as f64 + (1.0 - b1) * g) as f32;
            v[k] = (b2 * v[k] as f64 + (1.0 - b2) * g * g) as f32;
            let m_hat = m[k] as f64 / bias1;
            let v_hat = v[k] as f64 / bias2;
            p.value[k] -= (lr * m_hat / (v_hat.sqrt() + config.adam_epsilon)) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_index: usize,
    pub subject_dice: Vec<(String, f64)>,
    pub mean_dice: f64,
    pub epochs_trained: usize,
    pub stop_reason: StopReason,
}

/// A subject's full-frame slices (256x256, normalized, labels binary).
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub slices: Vec<SliceSample>,
}

pub struct TrainedFold {
    pub model: UNet,
    pub window: RoiWindow,
    pub weights: ClassWeights,
    pub history: Vec<EpochStats>,
    pub report: FoldReport,
}

fn batch_tensor(samples: &[&SliceSample]) -> (Vec<f32>, Vec<f32>) {
    let mut images = Vec::with_capacity(samples.len() * ROI_ROWS * ROI_COLS);
    let mut labels = Vec::with_capacity(samples.len() * ROI_ROWS * ROI_COLS);
    for s in samples {
        images.extend_from_slice(&s.image.data);
        labels.extend_from_slice(&s.label.as_ref().expect("training sample without label").data);
    }
    (images, labels)
}

/// Pooled full-frame Dice for one subject: predict each slice's ROI, restore
/// to the 256 frame, pool confusion counts against the full label.
pub fn subject_dice(
    model: &mut UNet,
    subject: &Subject,
    window: RoiWindow,
    threshold: f64,
) -> Result<f64> {
    let mut pooled = ConfusionCounts::default();
    for s in &subject.slices {
        if s.provenance.augmented {
            return Err(Error::Invalid(
                "evaluation received an augmented sample; evaluation must use originals".into(),
            ));
        }
        let truth = s
            .label
            .as_ref()
            .ok_or_else(|| Error::Invalid("evaluation requires labels".into()))?;
        let roi = crop_roi(s, window)?;
        let mask = model.predict_mask(
            &roi.image.data,
            [1, 1, ROI_ROWS, ROI_COLS],
            threshold,
        )?;
        let mask = Grid2::from_vec(ROI_ROWS, ROI_COLS, mask);
        let restored = restore_from_roi(&mask, window)?;
        pooled.add(&confusion(&restored, truth)?);
    }
    Ok(dice(&pooled))
}

fn mean_val_dice(
    model: &mut UNet,
    subjects: &[&Subject],
    window: RoiWindow,
    threshold: f64,
) -> Result<f64> {
    let mut sum = 0.0;
    for s in subjects {
        sum += subject_dice(model, s, window, threshold)?;
    }
    Ok(sum / subjects.len() as f64)
}

/// Train one fold: weighted-BCE epochs over shuffled mini-batches with Adam,
/// validation per-case Dice after each epoch, best-snapshot early stopping.
///
/// `train_samples` are ROI-cropped (and typically augmented); `val_subjects`
/// are full-frame originals. Class weights must come from the fold's
/// training labels only.
pub fn train_fold(
    train_samples: &[SliceSample],
    val_subjects: &[&Subject],
    window: RoiWindow,
    weights: &ClassWeights,
    unet_config: &UNetConfig,
    config: &TrainConfig,
    fold_index: usize,
) -> Result<TrainedFold> {
    config.validate()?;
    if train_samples.is_empty() || val_subjects.is_empty() {
        return Err(Error::Invalid("train_fold requires non-empty folds".into()));
    }
    let mut model: UNet = build_model(unet_config)?;
    let mut adam = AdamState::new(&model);
    let mut history = Vec::new();
    let mut best: Option<(f64, UNet, usize)> = None;
    let mut epochs_without_improvement = 0usize;
    let mut stop_reason = StopReason::MaxEpochs;
    let mut epochs_trained = 0usize;

    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    for epoch in 0..config.max_epochs {
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(config.seed ^ (fold_index as u64) << 32 ^ epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(
            config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (fold_index as u64) << 20 ^ epoch as u64,
        );

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&SliceSample> = chunk.iter().map(|&i| &train_samples[i]).collect();
            let (images, labels) = batch_tensor(&refs);
            let shape = [refs.len(), 1, ROI_ROWS, ROI_COLS];
            let mut tape: Tape<f32> = Tape::new();
            let x = tape.leaf(shape, images);
            let pass = model.forward(&mut tape, x, Mode::Train, &mut dropout_rng)?;
            let loss = tape.weighted_bce(pass.output, &labels, weights.w as f32, BCE_EPS as f32)?;
            let loss_val = tape.value(loss)[0] as f64;
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss diverged at fold {fold_index} epoch {epoch}"
                )));
            }
            tape.backward(loss)?;
            model.zero_grads();
            model.harvest_grads(&tape, &pass);
            adam_step(&mut model, &mut adam, config)?;
            epoch_loss += loss_val;
            batches += 1;
        }
        epochs_trained = epoch + 1;

        let val = mean_val_dice(&mut model, val_subjects, window, config.threshold)?;
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_dice: val,
        });
        let improved = best.as_ref().map(|(b, _, _)| val > *b).unwrap_or(true);
        if improved {
            best = Some((val, model.clone(), epoch));
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if epochs_without_improvement >= config.patience {
                stop_reason = StopReason::EarlyStopping;
                break;
            }
        }
    }

    let (best_dice, best_model, _) = best.expect("at least one epoch ran");
    let mut model = best_model;
    let mut subject_scores = Vec::new();
    for s in val_subjects {
        subject_scores.push((s.id.clone(), subject_dice(&mut model, s, window, config.threshold)?));
    }
    let mean_dice = subject_scores.iter().map(|(_, d)| d).sum::<f64>() / subject_scores.len() as f64;
    debug_assert!(mean_dice >= best_dice - 1e-9);
    Ok(TrainedFold {
        model,
        window,
        weights: weights.clone(),
        history,
        report: FoldReport {
            fold_index,
            subject_dice: subject_scores,
            mean_dice,
            epochs_trained,
            stop_reason,
        },
    })
}

/// Subject-level fold assignment: seeded shuffle, then round-robin.
pub fn assign_folds(subject_ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if subject_ids.len() < k {
        return Err(Error::Invalid(format!(
            "{} subjects cannot fill {k} folds",
            subject_ids.len()
        )));
    }
    let mut ids = subject_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(folds)
}

pub struct CrossValidation {
    pub fold_assignments: Vec<Vec<String>>,
    pub folds: Vec<TrainedFold>,
    pub aggregate_dice: f64,
}

/// Prepare one fold's training inputs from its training subjects only:
/// CI-slice selection, ROI window fit, crop, class weights, augmentation.
pub fn prepare_fold_training(
    train_subjects: &[&Subject],
    config: &TrainConfig,
    augment: &AugmentConfig,
) -> Result<(Vec<SliceSample>, RoiWindow, ClassWeights)> {
    let all_slices: Vec<SliceSample> = train_subjects
        .iter()
        .flat_map(|s| s.slices.iter().cloned())
        .collect();
    if all_slices.iter().any(|s| s.provenance.augmented) {
        return Err(Error::Invalid("fold preparation received augmented input".into()));
    }
    let ci = select_ci_slices(all_slices)?;
    if ci.is_empty() {
        return Err(Error::Invalid("training fold has no CI-containing slices".into()));
    }
    let labels: Vec<Grid2> = ci.iter().map(|s| s.label.clone().unwrap()).collect();
    let window = fit_roi_window(&labels, config.roi_margin)?;
    let cropped: Vec<SliceSample> = ci
        .iter()
        .map(|s| crop_roi(s, window))
        .collect::<Result<_>>()?;
    let roi_labels: Vec<Grid2> = cropped.iter().map(|s| s.label.clone().unwrap()).collect();
    let weights = compute_class_weights(&roi_labels)?;
    let augmented = augment_dataset(&cropped, augment)?;
    Ok((augmented, window, weights))
}

/// Full K-fold protocol: every subject is tested exactly once; class
/// weights, ROI window and augmentation are derived per fold from its
/// training subjects only.
pub fn kfold_cross_validate(
    subjects: &[Subject],
    unet_config: &UNetConfig,
    config: &TrainConfig,
    augment: &AugmentConfig,
) -> Result<CrossValidation> {
    config.validate()?;
    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let fold_assignments = assign_folds(&ids, config.k_folds, config.seed)?;
    let mut folds = Vec::with_capacity(config.k_folds);
    for (fold_index, test_ids) in fold_assignments.iter().enumerate() {
        let test: Vec<&Subject> = subjects
            .iter()
            .filter(|s| test_ids.contains(&s.id))
            .collect();
        let train: Vec<&Subject> = subjects
            .iter()
            .filter(|s| !test_ids.contains(&s.id))
            .collect();
        let (train_samples, window, weights) = prepare_fold_training(&train, config, augment)?;
        let trained = train_fold(
            &train_samples,
            &test,
            window,
            &weights,
            unet_config,
            config,
            fold_index,
        )?;
        folds.push(trained);
    }
    let aggregate_dice =
        folds.iter().map(|f| f.report.mean_dice).sum::<f64>() / folds.len() as f64;
    Ok(CrossValidation {
        fold_assignments,
        folds,
        aggregate_dice,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub subject_dice: Vec<(String, f64)>,
    pub mean_dice: f64,
    pub icc: IccReport,
}

/// Per-subject pooled Dice plus ICC between ground-truth and predicted CI
/// volumes (pixel counts) across subjects.
pub fn evaluate(
    model: &mut UNet,
    subjects: &[Subject],
    window: RoiWindow,
    threshold: f64,
) -> Result<EvaluationReport> {
    let mut subject_scores = Vec::new();
    let mut ratings = Vec::new();
    for s in subjects {
        let d = subject_dice(model, s, window, threshold)?;
        subject_scores.push((s.id.clone(), d));
        let mut truth_volume = 0u64;
        let mut pred_volume = 0u64;
        for slice in &s.slices {
            truth_volume += slice.label.as_ref().unwrap().count_nonzero() as u64;
            let roi = crop_roi(slice, window)?;
            let mask = model.predict_mask(&roi.image.data, [1, 1, ROI_ROWS, ROI_COLS], threshold)?;
            pred_volume += mask.iter().filter(|&&v| v != 0.0).count() as u64;
        }
        ratings.push(vec![truth_volume as f64, pred_volume as f64]);
    }
    let mean_dice =
        subject_scores.iter().map(|(_, d)| d).sum::<f64>() / subject_scores.len().max(1) as f64;
    Ok(EvaluationReport {
        subject_dice: subject_scores,
        mean_dice,
        icc: icc(&ratings)?,
    })
}

/// Compare predicted mask volumes against label volumes (no model involved);
/// used by the CLI `evaluate` command on files.
pub fn evaluate_masks(
    pairs: &[(String, Vec<Grid2>, Vec<Grid2>)],
) -> Result<EvaluationReport> {
    let mut subject_scores = Vec::new();
    let mut ratings = Vec::new();
    for (id, pred, truth) in pairs {
        let d = crate::metrics::dice_per_case(pred, truth)?;
        subject_scores.push((id.clone(), d));
        let tv: u64 = truth.iter().map(|g| g.count_nonzero() as u64).sum();
        let pv: u64 = pred.iter().map(|g| g.count_nonzero() as u64).sum();
        ratings.push(vec![tv as f64, pv as f64]);
    }
    let mean_dice =
        subject_scores.iter().map(|(_, d)| d).sum::<f64>() / subject_scores.len().max(1) as f64;
    Ok(EvaluationReport {
        subject_dice: subject_scores,
        mean_dice,
        icc: icc(&ratings)?,
    })
}
