//! Finite-difference gradient verification.
//!
//! Because the whole stack runs in f64, central differences with a step of
//! about 1e-5 resolve gradients to relative errors far below 1e-4, which is
//! what the acceptance checks demand.

use crate::autodiff::Tensor;
use ndarray::ArrayD;

/// Central-difference gradient of `f` with respect to `x`.
///
/// `f` must be a pure function of the array (rebuild the graph inside).
pub fn numeric_grad(f: &dyn Fn(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, step: f64) -> ArrayD<f64> {
    let mut g = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + step;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - step;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// `|a - n| / max(1e-6, |a|, |n|)`, elementwise maximum over the arrays.
pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / f64::max(1e-6, a.abs().max(n.abs())))
        .fold(0.0, f64::max)
}

/// Backpropagates `loss(x)` once analytically, differences it numerically,
/// and returns the worst relative error across all coordinates of `x`.
///
/// `loss` must map a leaf tensor to a scalar tensor and be deterministic.
pub fn check_scalar_loss(
    loss: &dyn Fn(&Tensor) -> Tensor,
    x0: &ArrayD<f64>,
    step: f64,
) -> f64 {
    let x = Tensor::param(x0.clone());
    let l = loss(&x);
    l.backward();
    let analytic = x
        .grad()
        .unwrap_or_else(|| ArrayD::zeros(x0.raw_dim()));
    let numeric = numeric_grad(
        &|xv: &ArrayD<f64>| loss(&Tensor::new(xv.clone())).item(),
        x0,
        step,
    );
    max_rel_err(&analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn quadratic_loss_checks_out() {
        let x0 = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.3, -0.7, 1.2]).unwrap();
        let err = check_scalar_loss(&|x| x.mul(x).sum(), &x0, 1e-5);
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn rel_err_uses_absolute_floor_near_zero() {
        let a = ArrayD::from_elem(IxDyn(&[1]), 0.0);
        let n = ArrayD::from_elem(IxDyn(&[1]), 1e-9);
        // Floored denominator keeps noise near zero from exploding the ratio.
        assert!(max_rel_err(&a, &n) < 1e-2);
    }
}
