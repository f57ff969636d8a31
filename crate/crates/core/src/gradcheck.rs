//! Central finite differences for checking analytic gradients.

use ndarray::{Array, Dimension};

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference<D, F>(x: &Array<f64, D>, h: f64, mut f: F) -> Array<f64, D>
where
    D: Dimension,
    F: FnMut(&Array<f64, D>) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Array::zeros(x.raw_dim());
    for i in 0..x.len() {
        let orig = probe.as_slice_memory_order().expect("contiguous")[i];
        probe.as_slice_memory_order_mut().expect("contiguous")[i] = orig + h;
        let up = f(&probe);
        probe.as_slice_memory_order_mut().expect("contiguous")[i] = orig - h;
        let down = f(&probe);
        probe.as_slice_memory_order_mut().expect("contiguous")[i] = orig;
        grad.as_slice_memory_order_mut().expect("contiguous")[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, with a floor on the denominator so that two
/// vanishing gradients compare equal.
pub fn relative_error<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let na = a.mapv(|v| v * v).sum().sqrt();
    let nb = b.mapv(|v| v * v).sum().sqrt();
    diff / na.max(nb).max(1e-10)
}
