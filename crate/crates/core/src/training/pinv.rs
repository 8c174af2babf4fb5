//! Batch least squares through the Moore-Penrose pseudoinverse.

use nalgebra::DMatrix;

/// `beta* = H^+ X`, minimum-norm least squares via SVD.
pub fn batch_pinv(h: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(h.nrows(), x.nrows(), "H and X need one row per sample");
    let eps = f64::EPSILON * h.nrows().max(h.ncols()) as f64 * h.amax().max(1.0);
    let pinv = h
        .clone()
        .pseudo_inverse(eps)
        .expect("pseudo_inverse only fails for a negative epsilon");
    pinv * x
}
