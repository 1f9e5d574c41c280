//! The 64-bit finite-difference verification suite: every differentiable
//! primitive plus a small end-to-end network, checked against central
//! differences. Used by the `gradcheck` CLI command and the acceptance tests.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{gradient_check, GradCheckReport, Mode, TensorId};
use crate::unet::{build_model, UNetConfig, UNetModel};

/// Tolerance for single-primitive checks.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Tolerance for the composed depth-2 network check.
pub const FULL_MODEL_TOL: f64 = 1e-3;

pub const OP_NAMES: &[&str] = &[
    "relu",
    "sigmoid",
    "conv2d",
    "transposed_conv2",
    "maxpool2",
    "batchnorm",
    "dropout",
    "concat_channels",
    "add",
    "mul",
    "scale",
    "sum",
    "weighted_bce",
    "unet-depth2",
];

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Values kept away from the ReLU/maxpool kinks so central differences are
/// valid.
fn rand_vec_off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    rand_vec(rng, n)
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
        .collect()
}

fn check_one(name: &str, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    match name {
        "relu" => {
            let xi = rand_vec_off_kink(rng, 16);
            gradient_check(name, &[([1, 1, 4, 4], xi)], PRIMITIVE_TOL, |tape| {
                let x = TensorId(0);
                let y = tape.relu(x);
                Ok((tape.sum(y), vec![x]))
            })
        }
        "sigmoid" => {
            let xi = rand_vec(rng, 12);
            gradient_check(name, &[([1, 1, 3, 4], xi)], PRIMITIVE_TOL, |tape| {
                let x = TensorId(0);
                let y = tape.sigmoid(x);
                Ok((tape.sum(y), vec![x]))
            })
        }
        "conv2d" => {
            let xi = rand_vec(rng, 2 * 2 * 6 * 6);
            let wi = rand_vec(rng, 3 * 2 * 9);
            let bi = rand_vec(rng, 3);
            gradient_check(
                name,
                &[([2, 2, 6, 6], xi), ([3, 2, 3, 3], wi), ([3, 1, 1, 1], bi)],
                PRIMITIVE_TOL,
                |tape| {
                    let (x, w, b) = (TensorId(0), TensorId(1), TensorId(2));
                    let y = tape.conv2d(x, w, b)?;
                    let s = tape.sigmoid(y);
                    Ok((tape.sum(s), vec![x, w, b]))
                },
            )
        }
        "transposed_conv2" => {
            let xi = rand_vec(rng, 2 * 4 * 4);
            let wi = rand_vec(rng, 2 * 3 * 4);
            let bi = rand_vec(rng, 3);
            gradient_check(
                name,
                &[([1, 2, 4, 4], xi), ([2, 3, 2, 2], wi), ([3, 1, 1, 1], bi)],
                PRIMITIVE_TOL,
                |tape| {
                    let (x, w, b) = (TensorId(0), TensorId(1), TensorId(2));
                    let y = tape.transposed_conv2(x, w, b)?;
                    let s = tape.sigmoid(y);
                    Ok((tape.sum(s), vec![x, w, b]))
                },
            )
        }
        "maxpool2" => {
            // distinct strictly ordered values: no ties within any window
            let xi: Vec<f64> = (0..32).map(|i| (i as f64) * 0.13 - 2.0).collect();
            gradient_check(name, &[([1, 2, 4, 4], xi)], PRIMITIVE_TOL, |tape| {
                let x = TensorId(0);
                let y = tape.maxpool2(x)?;
                let s = tape.sigmoid(y);
                Ok((tape.sum(s), vec![x]))
            })
        }
        "batchnorm" => {
            let xi = rand_vec(rng, 2 * 2 * 4 * 4);
            let gi = vec![1.2, 0.7];
            let be = vec![0.1, -0.3];
            gradient_check(
                name,
                &[([2, 2, 4, 4], xi), ([1, 2, 1, 1], gi), ([1, 2, 1, 1], be)],
                PRIMITIVE_TOL,
                |tape| {
                    let (x, g, b) = (TensorId(0), TensorId(1), TensorId(2));
                    let mut rm = vec![0.0; 2];
                    let mut rv = vec![1.0; 2];
                    let y = tape.batchnorm(x, g, b, &mut rm, &mut rv, 0.1, 1e-5, Mode::Train)?;
                    let s = tape.sigmoid(y);
                    Ok((tape.sum(s), vec![x, g, b]))
                },
            )
        }
        "dropout" => {
            // fixed RNG seed per builder call: the same mask is applied on the
            // analytic and both finite-difference passes
            let xi = rand_vec(rng, 2 * 3 * 4);
            gradient_check(name, &[([1, 2, 3, 4], xi)], PRIMITIVE_TOL, |tape| {
                let x = TensorId(0);
                let mut mask_rng = ChaCha8Rng::seed_from_u64(11);
                let y = tape.dropout(x, 0.4, Mode::Train, &mut mask_rng)?;
                let s = tape.sigmoid(y);
                Ok((tape.sum(s), vec![x]))
            })
        }
        "concat_channels" => {
            let ai = rand_vec(rng, 2 * 2 * 3 * 3);
            let bi = rand_vec(rng, 2 * 3 * 3);
            gradient_check(
                name,
                &[([2, 2, 3, 3], ai), ([2, 1, 3, 3], bi)],
                PRIMITIVE_TOL,
                |tape| {
                    let (a, b) = (TensorId(0), TensorId(1));
                    let y = tape.concat_channels(a, b)?;
                    let s = tape.sigmoid(y);
                    Ok((tape.sum(s), vec![a, b]))
                },
            )
        }
        "add" => {
            let ai = rand_vec(rng, 12);
            let bi = rand_vec(rng, 12);
            gradient_check(
                name,
                &[([1, 1, 3, 4], ai), ([1, 1, 3, 4], bi)],
                PRIMITIVE_TOL,
                |tape| {
                    let (a, b) = (TensorId(0), TensorId(1));
                    let y = tape.add(a, b)?;
                    let s = tape.sigmoid(y);
                    Ok((tape.sum(s), vec![a, b]))
                },
            )
        }
        "mul" => {
            let ai = rand_vec(rng, 12);
            let bi = rand_vec(rng, 12);
            gradient_check(
                name,
                &[([1, 1, 3, 4], ai), ([1, 1, 3, 4], bi)],
                PRIMITIVE_TOL,
                |tape| {
                    let (a, b) = (TensorId(0), TensorId(1));
                    let y = tape.mul(a, b)?;
                    let s = tape.sigmoid(y);
                    Ok((tape.sum(s), vec![a, b]))
                },
            )
        }
        "scale" => {
            let xi = rand_vec(rng, 12);
            gradient_check(name, &[([1, 1, 3, 4], xi)], PRIMITIVE_TOL, |tape| {
                let x = TensorId(0);
                let y = tape.scale(x, 1.7);
                let s = tape.sigmoid(y);
                Ok((tape.sum(s), vec![x]))
            })
        }
        "sum" => {
            let xi = rand_vec(rng, 12);
            gradient_check(name, &[([1, 1, 3, 4], xi)], PRIMITIVE_TOL, |tape| {
                let x = TensorId(0);
                Ok((tape.sum(x), vec![x]))
            })
        }
        "weighted_bce" => {
            let xi = rand_vec(rng, 16);
            let target: Vec<f64> = (0..16).map(|i| f64::from(i % 5 == 0)).collect();
            gradient_check(name, &[([1, 1, 4, 4], xi)], PRIMITIVE_TOL, move |tape| {
                let x = TensorId(0);
                let p = tape.sigmoid(x);
                let l = tape.weighted_bce(p, &target, 0.2, 1e-7)?;
                Ok((l, vec![x]))
            })
        }
        "unet-depth2" => {
            let cfg = UNetConfig {
                depth: 2,
                base_channels: 2,
                dropout_rate: 0.0,
                seed: 9,
                ..Default::default()
            };
            let model: UNetModel<f64> = build_model(&cfg)?;
            let input: Vec<f64> = (0..256).map(|i| ((i * 37) % 97) as f64 / 97.0).collect();
            let target: Vec<f64> = (0..256).map(|i| f64::from(i % 13 == 0)).collect();
            let mut inputs = vec![([1, 1, 16, 16], input)];
            for p in &model.params {
                inputs.push((p.shape, p.value.clone()));
            }
            let n_params = model.params.len();
            gradient_check(name, &inputs, FULL_MODEL_TOL, move |tape| {
                let mut m: UNetModel<f64> = build_model(&cfg)?;
                let x = TensorId(0);
                let param_leaves: Vec<TensorId> = (1..=n_params).map(TensorId).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let pass =
                    m.forward_with_param_leaves(tape, x, Mode::Train, &mut rng, &param_leaves)?;
                let loss = tape.weighted_bce(pass.output, &target, 0.3, 1e-7)?;
                let mut checked = vec![x];
                checked.extend(param_leaves);
                Ok((loss, checked))
            })
        }
        other => Err(Error::Invalid(format!(
            "unknown gradcheck op '{other}'; known: {}",
            OP_NAMES.join(", ")
        ))),
    }
}

/// A deliberately broken check used as a negative control: the loss drifts
/// between builder invocations, so finite differences cannot match the
/// analytic gradient and the report must FAIL.
fn check_injected_bug() -> Result<GradCheckReport> {
    let xi: Vec<f64> = (0..12).map(|i| (i as f64) * 0.21 - 1.0).collect();
    let calls = Cell::new(0u32);
    gradient_check(
        "injected-bug",
        &[([1, 1, 3, 4], xi)],
        PRIMITIVE_TOL,
        move |tape| {
            let n = calls.get();
            calls.set(n + 1);
            let x = TensorId(0);
            let y = tape.sigmoid(x);
            // every finite-difference evaluation (calls after the analytic
            // pass) computes a mis-scaled loss
            let k = if n == 0 { 1.0 } else { 1.01 };
            let y = tape.scale(y, k);
            Ok((tape.sum(y), vec![x]))
        },
    )
}

/// Run the suite, optionally restricted to one op by name; `inject_bug`
/// appends the failing negative control.
pub fn run_gradcheck(op_filter: Option<&str>, inject_bug: bool) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let names: Vec<&str> = match op_filter {
        Some(op) => {
            if !OP_NAMES.contains(&op) {
                return Err(Error::Invalid(format!(
                    "unknown gradcheck op '{op}'; known: {}",
                    OP_NAMES.join(", ")
                )));
            }
            vec![op]
        }
        None => OP_NAMES.to_vec(),
    };
    let mut reports = Vec::with_capacity(names.len() + 1);
    for name in names {
        reports.push(check_one(name, &mut rng)?);
    }
    if inject_bug {
        reports.push(check_injected_bug()?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let reports = run_gradcheck(None, false).unwrap();
        assert_eq!(reports.len(), OP_NAMES.len());
        for r in &reports {
            assert!(r.pass, "{r}");
        }
    }

    #[test]
    fn filter_selects_one_op() {
        let reports = run_gradcheck(Some("conv2d"), false).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].name, "conv2d");
        assert!(run_gradcheck(Some("nonsense"), false).is_err());
    }

    #[test]
    fn injected_bug_fails() {
        let reports = run_gradcheck(Some("relu"), true).unwrap();
        assert!(reports.iter().any(|r| r.name == "injected-bug" && !r.pass));
    }
}
