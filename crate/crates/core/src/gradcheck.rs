//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-4;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Maximum relative error between the graph gradient of `f` at `x` and
/// central differences, taken over every coordinate of `x`.
///
/// `f` must build a scalar on the graph it is handed and be deterministic.
pub fn finite_diff_check<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        g.value(out).item()
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * FD_STEP);
        let err = relative_error(analytic.data()[i], numeric);
        if !err.is_finite() {
            return Err(Error::Contract(format!("non-finite gradient at coordinate {i}")));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 5.0, -0.1]).unwrap();
        let err = finite_diff_check(|g, v| Ok(g.sum(v)), &x).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let x = Tensor::new(vec![4], vec![0.1, 0.7, -0.4, 1.3]).unwrap();
        // Derivative of x^3 deliberately reported as 2x instead of 3x^2.
        let err = finite_diff_check(
            |g, v| {
                let y = g.map_unary(v, |t| t * t * t, |t| 2.0 * t);
                Ok(g.sum(y))
            },
            &x,
        )
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }
}
