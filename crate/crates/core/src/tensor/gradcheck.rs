use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function.
pub fn finite_diff_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Result<Tensor> {
    let f0 = f(x);
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {f0}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Max over coordinates of `|analytic − numeric| / max(1, |numeric|)`.
pub fn finite_diff_check(
    f: impl Fn(&Tensor) -> f64,
    x: &Tensor,
    analytic: &Tensor,
    h: f64,
) -> Result<f64> {
    if analytic.shape() != x.shape() {
        return Err(Error::shape("finite_diff_check", x.shape(), analytic.shape()));
    }
    let numeric = finite_diff_gradient(f, x, h)?;
    Ok(relative_error(analytic, &numeric))
}

pub(crate) fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(0.0, |m, (&a, &n)| m.max((a - n).abs() / n.abs().max(1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_all_ones_gradient() {
        let x = Tensor::new(vec![3], vec![0.5, -2.0, 4.0]).unwrap();
        let err = finite_diff_check(|t| t.sum(), &x, &Tensor::filled(&[3], 1.0), DEFAULT_FD_STEP).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_gradient(|t| t.data().iter().map(|v| v * v).sum(), &x, DEFAULT_FD_STEP).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_objective_is_rejected() {
        let x = Tensor::zeros(&[1]);
        assert!(finite_diff_check(|_| f64::NAN, &x, &x, 1e-5).is_err());
    }
}
