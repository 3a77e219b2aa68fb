//! Central finite differences for validating tape gradients.

use super::Tensor;

/// Numeric gradient of a scalar function at `x0` by central differences,
/// one coordinate at a time.
pub fn finite_diff_grad<F>(x0: &Tensor<f64>, h: f64, mut f: F) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut grad = vec![0.0; x0.numel()];
    let mut probe = x0.clone();
    for i in 0..x0.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - h;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (hi - lo) / (2.0 * h);
    }
    Tensor::new(x0.shape().to_vec(), grad).expect("shape preserved")
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Worst relative error between an analytic and a numeric gradient.
pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
