//! Central finite-difference verification of tape gradients.

use super::tape::{backpropagate, Tape, Var};
use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares supplied analytic gradients against central differences of
/// `value_fn` around `inputs`.
pub fn compare_gradients<F>(value_fn: F, inputs: &[Tensor], analytic: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if analytic.len() != inputs.len() {
        return Err(Error::Shape("one gradient per input required".into()));
    }
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for (k, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[k].shape() {
            return Err(Error::Shape(format!("gradient {k} shape mismatch")));
        }
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = value_fn(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = value_fn(&work)?;
            work[k].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite difference at input {k} coordinate {i}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (k, i);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Records `f` on a fresh tape with every input as a differentiable leaf,
/// backpropagates, and compares against central differences.
pub fn finite_difference_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(inputs)?;
    let grads = backpropagate(&tape, out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    compare_gradients(
        |xs| {
            let (tape, _, out) = eval(xs)?;
            tape.value(out).item()
        },
        inputs,
        &analytic,
        eps,
    )
}
