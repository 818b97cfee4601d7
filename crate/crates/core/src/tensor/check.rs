//! Finite-difference gradient checker (double precision).

use super::Tensor;
use crate::error::{Error, Result};

/// Compares the analytic gradient of `f` at `x` against central differences.
/// Returns max over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if !x.requires_grad() {
        return Err(Error::Config("grad_check: x must be a grad-tracked leaf".into()));
    }
    x.zero_grad();
    let loss = f(x)?;
    if loss.numel() != 1 {
        return Err(Error::Shape(format!(
            "grad_check: f must return a scalar, got {:?}",
            loss.shape()
        )));
    }
    loss.backward()?;
    let analytic = x
        .grad()
        .ok_or_else(|| Error::Internal("grad_check: no gradient reached x".into()))?;

    let base = x.to_vec();
    let mut max_rel: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        x.set_data(plus)?;
        let lp = f(x)?.to_vec()[0];

        let mut minus = base.clone();
        minus[i] -= eps;
        x.set_data(minus)?;
        let lm = f(x)?.to_vec()[0];

        let numeric = (lp - lm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    x.set_data(base)?;
    x.zero_grad();
    Ok(max_rel)
}
