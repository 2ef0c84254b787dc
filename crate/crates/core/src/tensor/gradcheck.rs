//! Central finite-difference checking of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradient magnitude below which the absolute difference is used instead.
const ABS_FLOOR: f64 = 1e-8;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Flat input index of the worst coordinate.
    pub worst_index: usize,
    pub checked: usize,
    /// Largest analytic gradient magnitude among checked coordinates.
    pub max_abs_grad: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn eval_scalar<F>(f: &F, input: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let root = f(&mut tape, x)?;
    tape.value(root).item()
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Usage(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    Ok(())
}

/// Central differences `(f(x + e) - f(x - e)) / 2e` at the given flat coordinates.
pub fn numeric_gradient<F>(f: &F, input: &Tensor, epsilon: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_epsilon(epsilon)?;
    let mut probe = input.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + epsilon;
            let plus = eval_scalar(f, &probe)?;
            probe.data_mut()[i] = orig - epsilon;
            let minus = eval_scalar(f, &probe)?;
            probe.data_mut()[i] = orig;
            Ok((plus - minus) / (2.0 * epsilon))
        })
        .collect()
}

/// Relative error per coordinate, `|a - n| / max(|a|, |n|)`; when both
/// magnitudes are at most `1e-8` the absolute difference is used.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], tolerance: f64) -> GradReport {
    let mut worst = (0.0_f64, 0usize);
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let err = if scale <= ABS_FLOOR { diff } else { diff / scale };
        // NaN compares false everywhere, so track it explicitly.
        if err.is_nan() || err > worst.0 {
            worst = (if err.is_nan() { f64::INFINITY } else { err }, i);
        }
    }
    GradReport {
        max_rel_err: worst.0,
        worst_index: worst.1,
        checked: analytic.len(),
        max_abs_grad: analytic.iter().fold(0.0, |m, a| m.max(a.abs())),
        tolerance,
        pass: worst.0 <= tolerance,
    }
}

/// Checks every coordinate of `input`.
pub fn grad_check<F>(f: F, input: &Tensor, epsilon: f64, tolerance: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..input.len()).collect();
    grad_check_coords(f, input, epsilon, tolerance, &coords)
}

/// Checks only the listed flat coordinates of `input`.
pub fn grad_check_coords<F>(
    f: F,
    input: &Tensor,
    epsilon: f64,
    tolerance: f64,
    coords: &[usize],
) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_epsilon(epsilon)?;
    if let Some(&bad) = coords.iter().find(|&&i| i >= input.len()) {
        return Err(Error::Usage(format!(
            "coordinate {bad} out of range for {} elements",
            input.len()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let root = f(&mut tape, x)?;
    let first = tape.value(root).item()?;
    let second = eval_scalar(&f, input)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Harness(format!(
            "function is not deterministic: {first:e} then {second:e}"
        )));
    }
    let grad = tape.backward(root)?.get(x);
    let analytic: Vec<f64> = coords.iter().map(|&i| grad.data()[i]).collect();
    let numeric = numeric_gradient(&f, input, epsilon, coords)?;
    Ok(compare_gradients(&analytic, &numeric, tolerance))
}
