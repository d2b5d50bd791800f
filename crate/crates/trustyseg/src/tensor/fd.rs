//! Central-difference gradients, the verification oracle for backward().

use super::Tensor;

/// Numerical gradient of a deterministic scalar function at `x`.
///
/// Perturbs one coordinate at a time: `(f(x + h e_i) - f(x - h e_i)) / 2h`.
/// The result is a constant tensor with the shape of `x`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let mut plus = x.values().to_vec();
        plus[i] += h;
        let mut minus = x.values().to_vec();
        minus[i] -= h;
        let fp = f(&Tensor::from_vec(x.shape().to_vec(), plus).expect("shape preserved"));
        let fm = f(&Tensor::from_vec(x.shape().to_vec(), minus).expect("shape preserved"));
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::from_vec(x.shape().to_vec(), grad).expect("shape preserved")
}
