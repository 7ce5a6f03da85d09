//! Explicit-matrix route for small operators.
//!
//! Materializes `A` column by column and solves the Gram system through an
//! SVD of `A`. Slow, but independent of the structured solvers in
//! [`crate::degrade`], which makes it a useful cross-check.

use nalgebra::{DMatrix, DVector};

use crate::degrade::LinearOperator;
use crate::error::{Error, Result};
use crate::image::ThermalImage;

/// Largest input size (in pixels) the dense route accepts.
pub const MAX_DENSE_PIXELS: usize = 64 * 64;

pub fn to_dense(op: &LinearOperator) -> Result<DMatrix<f64>> {
    let (w, h) = op.in_shape();
    let n = w * h;
    if n > MAX_DENSE_PIXELS {
        return Err(Error::InvalidArgument(format!(
            "dense route limited to {MAX_DENSE_PIXELS} pixels, operator has {n}"
        )));
    }
    let (ow, oh) = op.out_shape();
    let mut a = DMatrix::zeros(ow * oh, n);
    for j in 0..n {
        let e = ThermalImage::from_fn(w, h, |x, y| if y * w + x == j { 1.0 } else { 0.0 });
        let col = op.forward(&e)?;
        for (i, v) in col.data().iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    Ok(a)
}

/// `(A Aᵀ + eta I)⁻¹ r` via `A = U S Vᵀ`, so `A Aᵀ = U S² Uᵀ`.
pub fn solve_gram_svd(op: &LinearOperator, r: &ThermalImage, eta: f64) -> Result<ThermalImage> {
    r.ensure_extent(op.out_shape())?;
    let a = to_dense(op)?;
    let m = a.nrows();
    let svd = a.svd(true, false);
    let u = svd.u.expect("requested U");
    let rv = DVector::from_column_slice(r.data());
    let coeffs = u.transpose() * &rv;
    let mut scaled = DVector::zeros(m);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    for i in 0..m {
        let s = if i < svd.singular_values.len() {
            svd.singular_values[i]
        } else {
            0.0
        };
        let d = s * s + eta;
        if d <= f64::EPSILON * (smax * smax).max(1.0) * m as f64 {
            return Err(Error::Singular(format!("Gram matrix has a zero eigenvalue (eta = {eta})")));
        }
        scaled[i] = coeffs[i] / d;
    }
    let w = u * scaled;
    let (ow, oh) = op.out_shape();
    Ok(ThermalImage::from_fn(ow, oh, |x, y| w[y * ow + x]))
}
