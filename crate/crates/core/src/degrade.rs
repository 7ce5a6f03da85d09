//! Linear degradation operators and the sensor noise model.
//!
//! An operator maps an image of `in_shape` to a measurement of `out_shape`.
//! Each one provides its forward map, its exact adjoint, and a solver for
//! `(A Aᵀ + η I) w = r` that uses the operator's structure where it can:
//! identity and block-mean downsampling have diagonal Gram matrices, the
//! rest go through conjugate gradients.

use crate::error::{Error, Result};
use crate::image::ThermalImage;
use crate::rng::SeededRng;

/// Relative residual target for the conjugate-gradient Gram solve.
pub const CG_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorKind {
    Identity,
    /// Block mean over non-overlapping `factor x factor` cells.
    BoxDownsample { factor: usize },
    /// Separable convolution with odd-length taps, zero boundary, same size.
    GaussianBlur { taps: Vec<f64> },
    /// Applied first to last.
    Composite(Vec<LinearOperator>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator {
    kind: OperatorKind,
    in_shape: (usize, usize),
    out_shape: (usize, usize),
}

/// Normalized Gaussian taps of odd length `len` with standard deviation `sigma` pixels.
pub fn gaussian_taps(sigma: f64, len: usize) -> Result<Vec<f64>> {
    if len % 2 == 0 || !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gaussian taps need odd length and positive sigma, got len={len} sigma={sigma}"
        )));
    }
    let r = (len / 2) as f64;
    let raw: Vec<f64> = (0..len)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / s).collect())
}

impl LinearOperator {
    pub fn identity(shape: (usize, usize)) -> Self {
        Self {
            kind: OperatorKind::Identity,
            in_shape: shape,
            out_shape: shape,
        }
    }

    pub fn box_downsample(in_shape: (usize, usize), factor: usize) -> Result<Self> {
        if factor == 0 || in_shape.0 % factor != 0 || in_shape.1 % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "extent {}x{} is not divisible by downsampling factor {factor}",
                in_shape.0, in_shape.1
            )));
        }
        Ok(Self {
            kind: OperatorKind::BoxDownsample { factor },
            in_shape,
            out_shape: (in_shape.0 / factor, in_shape.1 / factor),
        })
    }

    pub fn gaussian_blur(shape: (usize, usize), taps: Vec<f64>) -> Result<Self> {
        if taps.len() % 2 == 0 || taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("blur taps must be finite and odd in number".into()));
        }
        Ok(Self {
            kind: OperatorKind::GaussianBlur { taps },
            in_shape: shape,
            out_shape: shape,
        })
    }

    pub fn composite(ops: Vec<LinearOperator>) -> Result<Self> {
        let first = ops
            .first()
            .ok_or_else(|| Error::InvalidArgument("composite operator needs at least one stage".into()))?;
        for pair in ops.windows(2) {
            if pair[0].out_shape != pair[1].in_shape {
                return Err(Error::ShapeMismatch {
                    expected: pair[0].out_shape,
                    actual: pair[1].in_shape,
                });
            }
        }
        let in_shape = first.in_shape;
        let out_shape = ops.last().unwrap().out_shape;
        Ok(Self {
            kind: OperatorKind::Composite(ops),
            in_shape,
            out_shape,
        })
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn in_shape(&self) -> (usize, usize) {
        self.in_shape
    }

    pub fn out_shape(&self) -> (usize, usize) {
        self.out_shape
    }

    pub fn forward(&self, x: &ThermalImage) -> Result<ThermalImage> {
        x.ensure_extent(self.in_shape)?;
        Ok(match &self.kind {
            OperatorKind::Identity => x.map(|v| v),
            OperatorKind::BoxDownsample { factor } => box_mean(x, *factor),
            OperatorKind::GaussianBlur { taps } => convolve_separable(x, taps, false),
            OperatorKind::Composite(ops) => {
                let mut cur = x.map(|v| v);
                for op in ops {
                    cur = op.forward(&cur)?;
                }
                cur
            }
        })
    }

    pub fn adjoint(&self, v: &ThermalImage) -> Result<ThermalImage> {
        v.ensure_extent(self.out_shape)?;
        Ok(match &self.kind {
            OperatorKind::Identity => v.map(|x| x),
            OperatorKind::BoxDownsample { factor } => box_spread(v, *factor),
            OperatorKind::GaussianBlur { taps } => convolve_separable(v, taps, true),
            OperatorKind::Composite(ops) => {
                let mut cur = v.map(|x| x);
                for op in ops.iter().rev() {
                    cur = op.adjoint(&cur)?;
                }
                cur
            }
        })
    }

    /// `A Aᵀ v + eta v`.
    pub fn gram_apply(&self, v: &ThermalImage, eta: f64) -> Result<ThermalImage> {
        let g = self.forward(&self.adjoint(v)?)?;
        g.zip_map(v, |a, b| a + eta * b)
    }

    /// Solves `(A Aᵀ + eta I) w = r`.
    pub fn solve_gram(&self, r: &ThermalImage, eta: f64) -> Result<ThermalImage> {
        r.ensure_extent(self.out_shape)?;
        if !(eta >= 0.0) {
            return Err(Error::InvalidArgument(format!("gram regularizer must be >= 0, got {eta}")));
        }
        match &self.kind {
            OperatorKind::Identity => Ok(r.scale(1.0 / (1.0 + eta))),
            OperatorKind::BoxDownsample { factor } => {
                let d = 1.0 / (factor * factor) as f64;
                Ok(r.scale(1.0 / (d + eta)))
            }
            _ => self.solve_gram_cg(r, eta),
        }
    }

    fn solve_gram_cg(&self, r: &ThermalImage, eta: f64) -> Result<ThermalImage> {
        let (w, h) = self.out_shape;
        let rnorm = r.norm();
        let mut x = ThermalImage::zeros(w, h);
        if rnorm == 0.0 {
            return Ok(x);
        }
        let mut res = r.map(|v| v);
        let mut p = res.map(|v| v);
        let mut rr = res.dot(&res)?;
        let max_iter = 10 * w * h;
        for _ in 0..max_iter {
            let ap = self.gram_apply(&p, eta)?;
            let pap = p.dot(&ap)?;
            if !(pap > 0.0) {
                return Err(Error::Singular(format!(
                    "A Aᵀ + {eta} I is not positive definite along a search direction"
                )));
            }
            let alpha = rr / pap;
            axpy(&mut x, alpha, &p);
            axpy(&mut res, -alpha, &ap);
            let rr_new = res.dot(&res)?;
            if rr_new.sqrt() <= CG_TOLERANCE * rnorm {
                return Ok(x);
            }
            let beta = rr_new / rr;
            rr = rr_new;
            for (pv, rv) in p.data_mut().iter_mut().zip(res.data()) {
                *pv = rv + beta * *pv;
            }
        }
        Err(Error::Singular(format!(
            "conjugate gradients did not reach {CG_TOLERANCE:e} after {max_iter} iterations (eta = {eta})"
        )))
    }
}

fn axpy(y: &mut ThermalImage, a: f64, x: &ThermalImage) {
    for (yv, xv) in y.data_mut().iter_mut().zip(x.data()) {
        *yv += a * xv;
    }
}

fn box_mean(x: &ThermalImage, f: usize) -> ThermalImage {
    let (ow, oh) = (x.width() / f, x.height() / f);
    let inv = 1.0 / (f * f) as f64;
    ThermalImage::from_fn(ow, oh, |i, j| {
        let mut s = 0.0;
        for y in j * f..(j + 1) * f {
            for xx in i * f..(i + 1) * f {
                s += x.get(xx, y);
            }
        }
        s * inv
    })
}

fn box_spread(v: &ThermalImage, f: usize) -> ThermalImage {
    let inv = 1.0 / (f * f) as f64;
    ThermalImage::from_fn(v.width() * f, v.height() * f, |x, y| v.get(x / f, y / f) * inv)
}

/// Zero-boundary separable filtering. `transpose` flips the kernel, which
/// gives the exact adjoint of the untransposed pass.
fn convolve_separable(img: &ThermalImage, taps: &[f64], transpose: bool) -> ThermalImage {
    let (w, h) = img.extent();
    let r = (taps.len() / 2) as isize;
    let tap = |k: usize| if transpose { taps[taps.len() - 1 - k] } else { taps[k] };
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for k in 0..taps.len() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && xx < w as isize {
                    s += tap(k) * img.get(xx as usize, y);
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for k in 0..taps.len() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && yy < h as isize {
                    s += tap(k) * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    ThermalImage::from_raw_unbounded(w, h, out)
}

/// Additive sensor noise: i.i.d. Gaussian plus fixed column and row offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub gaussian_sigma: f64,
    pub fpn_column_sigma: f64,
    pub fpn_row_sigma: f64,
    pub fpn_seed: u64,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            gaussian_sigma: 0.0,
            fpn_column_sigma: 0.0,
            fpn_row_sigma: 0.0,
            fpn_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("gaussian_sigma", self.gaussian_sigma),
            ("fpn_column_sigma", self.fpn_column_sigma),
            ("fpn_row_sigma", self.fpn_row_sigma),
        ] {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {s}")));
            }
        }
        Ok(())
    }

    /// The stripe pattern. Depends only on `fpn_seed` and the extent: one
    /// offset per column, then one per row.
    pub fn fixed_pattern(&self, extent: (usize, usize)) -> ThermalImage {
        let (w, h) = extent;
        let mut rng = SeededRng::new(self.fpn_seed);
        let cols: Vec<f64> = (0..w).map(|_| self.fpn_column_sigma * rng.normal()).collect();
        let rows: Vec<f64> = (0..h).map(|_| self.fpn_row_sigma * rng.normal()).collect();
        ThermalImage::from_fn(w, h, |x, y| cols[x] + rows[y])
    }
}

/// `y = A x + g + f`: Gaussian `g` from `rng`, fixed pattern `f` from the
/// noise model's own seed.
pub fn degrade(
    x: &ThermalImage,
    op: &LinearOperator,
    noise: &NoiseModel,
    rng: &mut SeededRng,
) -> Result<ThermalImage> {
    noise.validate()?;
    let mut y = op.forward(x)?;
    let (w, h) = y.extent();
    if noise.fpn_column_sigma > 0.0 || noise.fpn_row_sigma > 0.0 {
        y = y.add(&noise.fixed_pattern((w, h)))?;
    }
    if noise.gaussian_sigma > 0.0 {
        let sigma = noise.gaussian_sigma;
        for v in y.data_mut() {
            *v += sigma * rng.normal();
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ValueDomain;

    fn random_image(w: usize, h: usize, rng: &mut SeededRng) -> ThermalImage {
        rng.normal_image(w, h)
    }

    #[test]
    fn identity_forward_adjoint_solve() {
        let mut rng = SeededRng::new(1);
        let x = random_image(5, 4, &mut rng);
        let op = LinearOperator::identity((5, 4));
        assert_eq!(op.forward(&x).unwrap().data(), x.data());
        assert_eq!(op.adjoint(&x).unwrap().data(), x.data());
        assert_eq!(op.solve_gram(&x, 0.0).unwrap().data(), x.data());
        let half = op.solve_gram(&x, 1.0).unwrap();
        for (a, b) in half.data().iter().zip(x.data()) {
            assert_eq!(*a, b / 2.0);
        }
    }

    #[test]
    fn box_downsample_constant_and_adjoint() {
        let op = LinearOperator::box_downsample((4, 4), 2).unwrap();
        let y = op.forward(&ThermalImage::filled(4, 4, ValueDomain::Unbounded, 8.0)).unwrap();
        assert_eq!(y.extent(), (2, 2));
        assert!(y.data().iter().all(|&v| v == 8.0));

        let op = LinearOperator::box_downsample((2, 2), 2).unwrap();
        let a = op.adjoint(&ThermalImage::filled(1, 1, ValueDomain::Unbounded, 1.0)).unwrap();
        assert_eq!(a.data(), &[0.25; 4]);
        let w = op.solve_gram(&ThermalImage::filled(1, 1, ValueDomain::Unbounded, 1.0), 0.0).unwrap();
        assert_eq!(w.data(), &[4.0]);
    }

    #[test]
    fn box_rejects_indivisible_extent() {
        assert!(LinearOperator::box_downsample((5, 4), 2).is_err());
    }

    #[test]
    fn blur_of_centered_impulse_is_outer_product() {
        let taps = vec![0.25, 0.5, 0.25];
        let op = LinearOperator::gaussian_blur((5, 5), taps.clone()).unwrap();
        let x = ThermalImage::from_fn(5, 5, |x, y| if (x, y) == (2, 2) { 1.0 } else { 0.0 });
        let y = op.forward(&x).unwrap();
        // Dense convolution oracle.
        for j in 0..5 {
            for i in 0..5 {
                let mut expected = 0.0;
                for q in 0..5 {
                    for p in 0..5 {
                        let (dx, dy) = (i as isize - p as isize, j as isize - q as isize);
                        if dx.abs() <= 1 && dy.abs() <= 1 {
                            expected += taps[(dx + 1) as usize] * taps[(dy + 1) as usize] * x.get(p, q);
                        }
                    }
                }
                assert!((y.get(i, j) - expected).abs() < 1e-15);
            }
        }
        assert_eq!(y.get(2, 2), 0.25);
        assert_eq!(y.get(1, 2), 0.125);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let op = LinearOperator::identity((4, 4));
        assert!(matches!(
            op.forward(&ThermalImage::zeros(3, 4)),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(op.adjoint(&ThermalImage::zeros(4, 3)).is_err());
    }

    #[test]
    fn cg_solves_blur_gram() {
        let mut rng = SeededRng::new(3);
        let op = LinearOperator::gaussian_blur((8, 8), gaussian_taps(1.0, 5).unwrap()).unwrap();
        let r = random_image(8, 8, &mut rng);
        let w = op.solve_gram(&r, 0.1).unwrap();
        let back = op.gram_apply(&w, 0.1).unwrap();
        let err = back.sub(&r).unwrap().norm() / r.norm();
        assert!(err <= 1e-10, "relative residual {err}");
    }

    #[test]
    fn rank_deficient_gram_at_zero_eta_errors() {
        // A zero kernel makes A Aᵀ the zero matrix.
        let op = LinearOperator::gaussian_blur((4, 4), vec![0.0, 0.0, 0.0]).unwrap();
        let r = ThermalImage::filled(4, 4, ValueDomain::Unbounded, 1.0);
        assert!(matches!(op.solve_gram(&r, 0.0), Err(Error::Singular(_))));
    }

    #[test]
    fn zero_noise_identity_is_exact() {
        let mut rng = SeededRng::new(9);
        let x = random_image(6, 6, &mut rng);
        let y = degrade(&x, &LinearOperator::identity((6, 6)), &NoiseModel::none(), &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn fixed_pattern_is_fixed_and_column_constant() {
        let noise = NoiseModel {
            gaussian_sigma: 0.0,
            fpn_column_sigma: 1.0,
            fpn_row_sigma: 0.0,
            fpn_seed: 1234,
        };
        let zero = ThermalImage::zeros(64, 64);
        let op = LinearOperator::identity((64, 64));
        let a = degrade(&zero, &op, &noise, &mut SeededRng::new(1)).unwrap();
        let b = degrade(&zero, &op, &noise, &mut SeededRng::new(2)).unwrap();
        assert_eq!(a, b);

        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        for x in 0..64 {
            let col: Vec<f64> = (0..64).map(|y| a.get(x, y)).collect();
            assert!(col.iter().all(|&v| v == col[0]));
        }
        for y in 0..64 {
            let row: Vec<f64> = (0..64).map(|x| a.get(x, y)).collect();
            assert!(var(&row) > 0.0);
        }
    }

    #[test]
    fn negative_sigma_is_rejected() {
        let mut noise = NoiseModel::none();
        noise.fpn_row_sigma = -1.0;
        let op = LinearOperator::identity((2, 2));
        assert!(degrade(&ThermalImage::zeros(2, 2), &op, &noise, &mut SeededRng::new(0)).is_err());
    }
}
