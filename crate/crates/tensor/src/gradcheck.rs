//! Finite-difference oracle for checking tape gradients.

use crate::tensor::Tensor;

/// Central-difference estimate `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate of `x`, in 64-bit.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `max|a - b| / max(max|a|, max|b|, floor)`: relative error in the
/// infinity norm, with a floor for all-zero gradients.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shapes");
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.max_abs().max(b.max_abs()).max(1e-8);
    diff / scale
}
