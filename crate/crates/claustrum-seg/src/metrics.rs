//! Loss and evaluation mathematics: class-weighted BCE, confusion counts,
//! Dice overlap, and the six Shrout-Fleiss intraclass correlation variants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2;

pub const BCE_EPS: f64 = 1e-7;

/// Complementary class weights derived from training-label pixel counts.
///
/// `w` is the foreground fraction; the background log-term carries weight
/// `w` and the foreground term `1 - w`, so the rare class dominates the loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: f64,
    pub one_minus_w: f64,
    pub ci_pixels: u64,
    pub total_pixels: u64,
}

impl ClassWeights {
    pub fn from_fraction(f: f64) -> Self {
        ClassWeights {
            w: f,
            one_minus_w: 1.0 - f,
            ci_pixels: 0,
            total_pixels: 0,
        }
    }
}

/// Foreground fraction over the selected ROI slices: f = sum(CI) / sum(all).
pub fn compute_class_weights(labels: &[Grid2]) -> Result<ClassWeights> {
    if labels.is_empty() {
        return Err(Error::Invalid("class weights need at least one slice".into()));
    }
    let mut ci = 0u64;
    let mut total = 0u64;
    for l in labels {
        ci += l.count_nonzero() as u64;
        total += l.len() as u64;
    }
    let f = ci as f64 / total as f64;
    if f >= 1.0 {
        eprintln!("warning: all training pixels are foreground; class weights degenerate (w = 1)");
    }
    Ok(ClassWeights {
        w: f,
        one_minus_w: 1.0 - f,
        ci_pixels: ci,
        total_pixels: total,
    })
}

/// Mean weighted BCE over all pixels, plus the gradient w.r.t. predictions.
///
/// Per pixel: -(1-w)*c*log(p) - w*(1-c)*log(1-p), with p clamped to
/// [eps, 1-eps].
pub fn weighted_bce(pred: &[f64], target: &[f64], weights: &ClassWeights) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} targets", pred.len()),
            found: format!("{}", target.len()),
        });
    }
    if target.iter().any(|&c| c != 0.0 && c != 1.0) {
        return Err(Error::Invalid("weighted_bce target must be binary".into()));
    }
    let w = weights.w;
    let fw = weights.one_minus_w;
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &c) in pred.iter().zip(target) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss += -(fw * c * p.ln()) - w * (1.0 - c) * (1.0 - p).ln();
        grad.push((-(fw * c) / p + w * (1.0 - c) / (1.0 - p)) / n);
    }
    Ok((loss / n, grad))
}

/// Pixel-level classification counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

pub fn confusion(pred: &Grid2, truth: &Grid2) -> Result<ConfusionCounts> {
    if pred.rows != truth.rows || pred.cols != truth.cols {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", truth.rows, truth.cols),
            found: format!("{}x{}", pred.rows, pred.cols),
        });
    }
    if !pred.is_binary() || !truth.is_binary() {
        return Err(Error::Invalid("confusion requires binary masks".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        match (p != 0.0, t != 0.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Dice = 2TP / (2TP + FP + FN); 1.0 when both masks are empty.
pub fn dice(counts: &ConfusionCounts) -> f64 {
    let denom = 2 * counts.tp + counts.fp + counts.fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * counts.tp as f64 / denom as f64
    }
}

/// Per-subject Dice: confusion counts pooled over all slices of the subject,
/// then one Dice per subject (not the mean of slice Dices).
pub fn dice_per_case(pred_slices: &[Grid2], truth_slices: &[Grid2]) -> Result<f64> {
    if pred_slices.len() != truth_slices.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} slices", truth_slices.len()),
            found: format!("{}", pred_slices.len()),
        });
    }
    let mut pooled = ConfusionCounts::default();
    for (p, t) in pred_slices.iter().zip(truth_slices) {
        pooled.add(&confusion(p, t)?);
    }
    Ok(dice(&pooled))
}

/// The six Shrout-Fleiss ICC variants from a subjects x judges rating matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IccReport {
    #[serde(rename = "ICC1")]
    pub icc1: f64,
    #[serde(rename = "ICC2")]
    pub icc2: f64,
    #[serde(rename = "ICC3")]
    pub icc3: f64,
    #[serde(rename = "ICC1k")]
    pub icc1k: f64,
    #[serde(rename = "ICC2k")]
    pub icc2k: f64,
    #[serde(rename = "ICC3k")]
    pub icc3k: f64,
    pub n_subjects: usize,
    pub n_judges: usize,
    pub degenerate: Option<String>,
}

/// Two-way ANOVA decomposition and the Shrout-Fleiss formulas.
///
/// `ratings[i][j]` is judge j's rating of subject i. Requires n >= 2 subjects
/// and k >= 2 judges with no missing cells. Zero between-subject variance is
/// degenerate: all six values are NaN with an explanation.
pub fn icc(ratings: &[Vec<f64>]) -> Result<IccReport> {
    let n = ratings.len();
    if n < 2 {
        return Err(Error::Invalid("icc needs at least 2 subjects".into()));
    }
    let k = ratings[0].len();
    if k < 2 {
        return Err(Error::Invalid("icc needs at least 2 judges".into()));
    }
    if ratings.iter().any(|r| r.len() != k) {
        return Err(Error::Invalid("icc rating matrix is ragged".into()));
    }

    let nf = n as f64;
    let kf = k as f64;
    let grand: f64 = ratings.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = ratings.iter().map(|r| r.iter().sum::<f64>() / kf).collect();
    let col_means: Vec<f64> = (0..k)
        .map(|j| ratings.iter().map(|r| r[j]).sum::<f64>() / nf)
        .collect();

    let ss_subjects: f64 = kf * row_means.iter().map(|&m| (m - grand) * (m - grand)).sum::<f64>();
    let ss_judges: f64 = nf * col_means.iter().map(|&m| (m - grand) * (m - grand)).sum::<f64>();
    // residual sums computed directly (not by subtraction of the other sums)
    // so that perfect agreement yields exactly zero
    let mut ss_error = 0.0;
    let mut ss_within = 0.0;
    for (i, row) in ratings.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            let e = x - row_means[i] - col_means[j] + grand;
            ss_error += e * e;
            let w = x - row_means[i];
            ss_within += w * w;
        }
    }

    let bms = ss_subjects / (nf - 1.0);
    let jms = ss_judges / (kf - 1.0);
    let ems = ss_error / ((nf - 1.0) * (kf - 1.0));
    let wms = ss_within / (nf * (kf - 1.0));

    if bms <= 0.0 {
        return Ok(IccReport {
            icc1: f64::NAN,
            icc2: f64::NAN,
            icc3: f64::NAN,
            icc1k: f64::NAN,
            icc2k: f64::NAN,
            icc3k: f64::NAN,
            n_subjects: n,
            n_judges: k,
            degenerate: Some(
                "zero between-subject variance: ICC undefined for constant subjects".into(),
            ),
        });
    }

    let icc1 = (bms - wms) / (bms + (kf - 1.0) * wms);
    let icc2 = (bms - ems) / (bms + (kf - 1.0) * ems + kf * (jms - ems) / nf);
    let icc3 = (bms - ems) / (bms + (kf - 1.0) * ems);
    let icc1k = (bms - wms) / bms;
    let icc2k = (bms - ems) / (bms + (jms - ems) / nf);
    let icc3k = (bms - ems) / bms;

    Ok(IccReport {
        icc1,
        icc2,
        icc3,
        icc1k,
        icc2k,
        icc3k,
        n_subjects: n,
        n_judges: k,
        degenerate: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_from(rows: usize, cols: usize, vals: &[f32]) -> Grid2 {
        Grid2::from_vec(rows, cols, vals.to_vec())
    }

    #[test]
    fn class_weights_table_counts() {
        // 198 foreground of 7168 total
        let mut l = Grid2::zeros(64, 112);
        for i in 0..198 {
            l.data[i] = 1.0;
        }
        let w = compute_class_weights(&[l]).unwrap();
        assert!((w.w - 198.0 / 7168.0).abs() < 1e-12);
        assert!((w.w + w.one_minus_w - 1.0).abs() < 1e-15);
        assert_eq!(w.ci_pixels, 198);
        assert_eq!(w.total_pixels, 7168);
    }

    #[test]
    fn class_weights_pooled_over_slices() {
        let counts = [198usize, 209, 187];
        let labels: Vec<Grid2> = counts
            .iter()
            .map(|&c| {
                let mut g = Grid2::zeros(64, 112);
                for i in 0..c {
                    g.data[i] = 1.0;
                }
                g
            })
            .collect();
        let w = compute_class_weights(&labels).unwrap();
        assert!((w.w - 594.0 / (3.0 * 7168.0)).abs() < 1e-12);
    }

    #[test]
    fn class_weights_all_foreground_is_degenerate() {
        let l = grid_from(1, 4, &[1.0; 4]);
        let w = compute_class_weights(&[l]).unwrap();
        assert_eq!(w.w, 1.0);
    }

    #[test]
    fn bce_perfect_prediction_near_zero() {
        let w = ClassWeights::from_fraction(0.3);
        let (loss, _) = weighted_bce(&[1.0 - BCE_EPS], &[1.0], &w).unwrap();
        assert!(loss.abs() < 1e-6);
    }

    #[test]
    fn bce_half_half_is_half_ln2() {
        let w = ClassWeights::from_fraction(0.5);
        let (loss, _) = weighted_bce(&[0.5], &[1.0], &w).unwrap();
        assert!((loss - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_at_half_weight_is_half_standard_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred: Vec<f64> = (0..100).map(|_| rng.gen_range(0.01..0.99)).collect();
        let target: Vec<f64> = (0..100).map(|_| f64::from(rng.gen_bool(0.3))).collect();
        let w = ClassWeights::from_fraction(0.5);
        let (loss, _) = weighted_bce(&pred, &target, &w).unwrap();
        let standard: f64 = pred
            .iter()
            .zip(&target)
            .map(|(&p, &c)| -c * p.ln() - (1.0 - c) * (1.0 - p).ln())
            .sum::<f64>()
            / 100.0;
        assert!((loss - 0.5 * standard).abs() < 1e-12);
    }

    #[test]
    fn bce_minimized_at_target() {
        // grid search over p for a single pixel: minimum sits at p = c
        let w = ClassWeights::from_fraction(0.2);
        for c in [0.0, 1.0] {
            let mut best = (f64::INFINITY, -1.0);
            for i in 1..1000 {
                let p = i as f64 / 1000.0;
                let (loss, _) = weighted_bce(&[p], &[c], &w).unwrap();
                if loss < best.0 {
                    best = (loss, p);
                }
            }
            assert!((best.1 - c).abs() <= 0.001 + 1e-9, "c={c} argmin={}", best.1);
        }
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred: Vec<f64> = (0..50).map(|_| rng.gen_range(0.05..0.95)).collect();
        let target: Vec<f64> = (0..50).map(|_| f64::from(rng.gen_bool(0.4))).collect();
        let w = ClassWeights::from_fraction(0.1);
        let (_, grad) = weighted_bce(&pred, &target, &w).unwrap();
        for k in 0..pred.len() {
            let h = 1e-6;
            let mut p1 = pred.clone();
            p1[k] += h;
            let mut p2 = pred.clone();
            p2[k] -= h;
            let f1 = weighted_bce(&p1, &target, &w).unwrap().0;
            let f2 = weighted_bce(&p2, &target, &w).unwrap().0;
            let fd = (f1 - f2) / (2.0 * h);
            let rel = (grad[k] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-6, "coord {k}: analytic {} fd {fd}", grad[k]);
        }
    }

    #[test]
    fn confusion_and_dice_basics() {
        let t = grid_from(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let c = confusion(&t, &t).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 0, fn_: 0, tn: 2 });
        assert_eq!(dice(&c), 1.0);

        let inv = grid_from(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        let c = confusion(&inv, &t).unwrap();
        assert_eq!(c.tp, 0);
        assert_eq!(c.tn, 0);
        assert_eq!(dice(&c), 0.0);

        let zeros = Grid2::zeros(2, 2);
        let c = confusion(&zeros, &zeros).unwrap();
        assert_eq!(c.tn, 4);
        assert_eq!(dice(&c), 1.0); // both empty

        assert!(confusion(&grid_from(1, 1, &[0.5]), &grid_from(1, 1, &[0.0])).is_err());
    }

    #[test]
    fn dice_direct_evaluation() {
        let c = ConfusionCounts { tp: 5, fp: 3, fn_: 2, tn: 0 };
        assert!((dice(&c) - 10.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn dice_per_case_pools_counts() {
        // slices (tp=5,fp=3,fn=2) and (tp=5,fp=0,fn=0): pooled 20/25 = 0.8,
        // not the mean of slice Dices (0.667 + 1.0)/2
        let mut p1 = Grid2::zeros(4, 4);
        let mut t1 = Grid2::zeros(4, 4);
        for i in 0..5 {
            p1.data[i] = 1.0;
            t1.data[i] = 1.0;
        }
        for i in 5..8 {
            p1.data[i] = 1.0; // fp
        }
        for i in 8..10 {
            t1.data[i] = 1.0; // fn
        }
        let mut p2 = Grid2::zeros(4, 4);
        for i in 0..5 {
            p2.data[i] = 1.0;
        }
        let t2 = p2.clone();
        let d = dice_per_case(&[p1, p2], &[t1, t2]).unwrap();
        assert!((d - 0.8).abs() < 1e-15);
    }

    #[test]
    fn dice_per_case_empty_pred_is_zero() {
        let mut t = Grid2::zeros(4, 4);
        t.data[0] = 1.0;
        let d = dice_per_case(&[Grid2::zeros(4, 4)], &[t]).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn icc_perfect_agreement_is_one() {
        let ratings: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 + 1.0; 2]).collect();
        let r = icc(&ratings).unwrap();
        for v in [r.icc1, r.icc2, r.icc3, r.icc1k, r.icc2k, r.icc3k] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn icc_constant_offset_judges() {
        // judge2 = judge1 + 5: perfect consistency, imperfect agreement
        let ratings: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                let v = (i * i) as f64;
                vec![v, v + 5.0]
            })
            .collect();
        let r = icc(&ratings).unwrap();
        assert!((r.icc3 - 1.0).abs() < 1e-12, "icc3 = {}", r.icc3);
        assert!((r.icc3k - 1.0).abs() < 1e-12);
        assert!(r.icc2 < 1.0);
        assert!(r.icc1 < 1.0);
        assert!(r.icc2k < 1.0);
    }

    #[test]
    fn icc_degenerate_zero_variance() {
        let ratings = vec![vec![3.0, 3.0], vec![3.0, 3.0]];
        let r = icc(&ratings).unwrap();
        assert!(r.icc1.is_nan());
        assert!(r.degenerate.is_some());
    }

    #[test]
    fn icc_rejects_small_or_ragged_input() {
        assert!(icc(&[vec![1.0, 2.0]]).is_err());
        assert!(icc(&[vec![1.0], vec![2.0]]).is_err());
        assert!(icc(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn spearman_brown_relation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let k = rng.gen_range(2..5usize);
            let ratings: Vec<Vec<f64>> = (0..10)
                .map(|_| {
                    let base: f64 = rng.gen_range(0.0..10.0);
                    (0..k).map(|_| base + rng.gen_range(-1.0..1.0)).collect()
                })
                .collect();
            let r = icc(&ratings).unwrap();
            let kf = k as f64;
            let sb = |single: f64| kf * single / (1.0 + (kf - 1.0) * single);
            assert!((r.icc1k - sb(r.icc1)).abs() < 1e-10);
            assert!((r.icc3k - sb(r.icc3)).abs() < 1e-10);
        }
    }

    /// Independent route: fit the two-way model explicitly and accumulate
    /// residual sums of squares cell by cell.
    fn icc_oracle(ratings: &[Vec<f64>]) -> [f64; 6] {
        let n = ratings.len() as f64;
        let k = ratings[0].len() as f64;
        let all: Vec<f64> = ratings.iter().flatten().copied().collect();
        let grand = all.iter().sum::<f64>() / all.len() as f64;

        let mut ss_between = 0.0;
        let mut ss_within = 0.0;
        for row in ratings {
            let rm = row.iter().sum::<f64>() / k;
            ss_between += k * (rm - grand).powi(2);
            for &x in row {
                ss_within += (x - rm).powi(2);
            }
        }
        let mut ss_judge = 0.0;
        for j in 0..ratings[0].len() {
            let cm = ratings.iter().map(|r| r[j]).sum::<f64>() / n;
            ss_judge += n * (cm - grand).powi(2);
        }
        let mut ss_resid = 0.0;
        for (i, row) in ratings.iter().enumerate() {
            let rm = row.iter().sum::<f64>() / k;
            for (j, &x) in row.iter().enumerate() {
                let cm = ratings.iter().map(|r| r[j]).sum::<f64>() / n;
                ss_resid += (x - rm - cm + grand).powi(2);
            }
            let _ = i;
        }
        let bms = ss_between / (n - 1.0);
        let wms = ss_within / (n * (k - 1.0));
        let jms = ss_judge / (k - 1.0);
        let ems = ss_resid / ((n - 1.0) * (k - 1.0));
        [
            (bms - wms) / (bms + (k - 1.0) * wms),
            (bms - ems) / (bms + (k - 1.0) * ems + k * (jms - ems) / n),
            (bms - ems) / (bms + (k - 1.0) * ems),
            (bms - wms) / bms,
            (bms - ems) / (bms + (jms - ems) / n),
            (bms - ems) / bms,
        ]
    }

    #[test]
    fn icc_matches_independent_anova_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let ratings: Vec<Vec<f64>> = (0..30)
                .map(|_| vec![rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)])
                .collect();
            let r = icc(&ratings).unwrap();
            let o = icc_oracle(&ratings);
            let got = [r.icc1, r.icc2, r.icc3, r.icc1k, r.icc2k, r.icc3k];
            for (g, e) in got.iter().zip(&o) {
                assert!((g - e).abs() < 1e-10, "got {g}, oracle {e}");
            }
        }
    }
}
