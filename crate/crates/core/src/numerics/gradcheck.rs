//! Central finite differences, the independent oracle for [`Graph::backward`].
//!
//! [`Graph::backward`]: super::Graph::backward

use super::Tensor;
use crate::{Error, Result};

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("finite difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = x.zeros_like();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest element-wise relative disagreement between two gradients.
///
/// Each element is compared as `|a − b| / max(|a|, |b|, floor · scale)`
/// where `scale` is the largest magnitude in either tensor. Elements far
/// below the gradient's own scale are judged against that floor, so
/// finite-difference round-off on near-zero entries cannot dominate.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> Result<f64> {
    analytic.expect_same_shape(numeric, "max_relative_error")?;
    let scale = analytic.max_abs().max(numeric.max_abs());
    let floor = (floor * scale).max(f64::MIN_POSITIVE);
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 4.0]).unwrap();
        let g = finite_diff_grad(|_| Ok(7.0), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
