//! Central finite differences, used as an independent oracle for the
//! analytic gradients produced by [`Tape::backward`](super::Tape::backward).
//!
//! Everything here only ever evaluates the forward function.

use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

/// Smallest magnitude treated as "relative" in [`relative_error`].
pub const REL_FLOOR: f64 = 1e-6;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn numeric_gradient<T: Scalar>(x: &Tensor<T>, step: f64, mut f: impl FnMut(&Tensor<T>) -> f64) -> Tensor<T> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::lit(step);
        let up = f(&probe);
        probe.data_mut()[i] = orig - T::lit(step);
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = T::lit((up - down) / (2.0 * step));
    }
    out
}

/// Same as [`numeric_gradient`] on a chosen subset of coordinates.
pub fn numeric_gradient_at<T: Scalar>(
    x: &Tensor<T>,
    coords: &[usize],
    step: f64,
    mut f: impl FnMut(&Tensor<T>) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + T::lit(step);
            let up = f(&probe);
            probe.data_mut()[i] = orig - T::lit(step);
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Largest elementwise [`relative_error`] between two equally sized slices.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
