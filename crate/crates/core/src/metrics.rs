//! Full-reference image quality metrics.

use crate::error::{Error, Result};
use crate::image::ThermalImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_extent(a: &ThermalImage, b: &ThermalImage) -> Result<()> {
    b.ensure_extent(a.extent())
}

pub fn mse(a: &ThermalImage, b: &ThermalImage) -> Result<f64> {
    same_extent(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(a: &ThermalImage, b: &ThermalImage, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a `w x h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over every position where the 11x11
/// Gaussian window fits inside the image.
pub fn ssim(a: &ThermalImage, b: &ThermalImage, peak: f64) -> Result<f64> {
    same_extent(a, b)?;
    let (w, h) = a.extent();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let (x, y) = (a.data(), b.data());
    if x == y {
        return Ok(1.0);
    }
    let taps = ssim_taps();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect() };
    let mu_x = filter_valid(x, w, h, &taps);
    let mu_y = filter_valid(y, w, h, &taps);
    let xx = filter_valid(&prod(&|p, _| p * p), w, h, &taps);
    let yy = filter_valid(&prod(&|_, q| q * q), w, h, &taps);
    let xy = filter_valid(&prod(&|p, q| p * q), w, h, &taps);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = xx[i] - mx * mx;
        let vy = yy[i] - my * my;
        let cov = xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricReport {
    /// Averages over the per-image entries.
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len().max(1) as f64;
        Self {
            psnr_db: per_image.iter().map(|m| m.psnr_db).sum::<f64>() / n,
            ssim: per_image.iter().map(|m| m.ssim).sum::<f64>() / n,
            per_image,
        }
    }
}

/// PSNR and SSIM of `restored` against `reference`, both in the unit domain.
pub fn evaluate_pair(id: &str, reference: &ThermalImage, restored: &ThermalImage) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        id: id.to_string(),
        psnr_db: psnr(reference, restored, 1.0)?,
        ssim: ssim(reference, restored, 1.0)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn psnr_closed_forms() {
        let a = ThermalImage::from_fn(8, 8, |x, y| (x + y) as f64 * 0.05);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn mse_matches_direct_loop() {
        let mut rng = SeededRng::new(4);
        let a = rng.normal_image(13, 7);
        let b = rng.normal_image(13, 7);
        let mut acc = 0.0;
        for y in 0..7 {
            for x in 0..13 {
                let d = a.get(x, y) - b.get(x, y);
                acc += d * d;
            }
        }
        assert_eq!(mse(&a, &b).unwrap(), acc / 91.0);
    }

    /// SSIM evaluated window by window straight from its definition.
    fn ssim_literal(a: &ThermalImage, b: &ThermalImage, peak: f64) -> f64 {
        let taps = ssim_taps();
        let (w, h) = a.extent();
        let c1 = (0.01 * peak).powi(2);
        let c2 = (0.03 * peak).powi(2);
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..=h - 11 {
            for ox in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let g = taps[i] * taps[j];
                        mx += g * a.get(ox + i, oy + j);
                        my += g * b.get(ox + i, oy + j);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let g = taps[i] * taps[j];
                        let dx = a.get(ox + i, oy + j) - mx;
                        let dy = b.get(ox + i, oy + j) - my;
                        vx += g * dx * dx;
                        vy += g * dy * dy;
                        cxy += g * dx * dy;
                    }
                }
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_literal_definition() {
        let mut rng = SeededRng::new(9);
        let a = rng.normal_image(16, 16).map(|v| 0.5 + 0.2 * v);
        let b = a.zip_map(&rng.normal_image(16, 16), |x, n| x + 0.1 * n).unwrap();
        let fast = ssim(&a, &b, 1.0).unwrap();
        assert!((fast - ssim_literal(&a, &b, 1.0)).abs() < 1e-10);
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let mut rng = SeededRng::new(1);
        let a = rng.normal_image(20, 20);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
        // Anti-correlated around a shared mean: the structure term goes negative.
        let pos = a.map(|v| 0.5 + 0.1 * v);
        let neg = a.map(|v| 0.5 - 0.1 * v);
        assert!(ssim(&pos, &neg, 1.0).unwrap() < 0.0);
        assert!(ssim(&ThermalImage::zeros(8, 20), &ThermalImage::zeros(8, 20), 1.0).is_err());
    }

    proptest! {
        #[test]
        fn psnr_symmetric_and_shift_invariant(seed in any::<u64>(), shift in -0.3f64..0.3) {
            let mut rng = SeededRng::new(seed);
            let a = rng.normal_image(12, 12).map(|v| 0.5 + 0.1 * v);
            let b = rng.normal_image(12, 12).map(|v| 0.5 + 0.1 * v);
            let p = psnr(&a, &b, 1.0).unwrap();
            prop_assert_eq!(p, psnr(&b, &a, 1.0).unwrap());
            let q = psnr(&a.map(|v| v + shift), &b.map(|v| v + shift), 1.0).unwrap();
            prop_assert!((p - q).abs() < 1e-9);
        }

        #[test]
        fn ssim_bounded_by_one(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let a = rng.normal_image(14, 12);
            let b = rng.normal_image(14, 12);
            prop_assert!(ssim(&a, &b, 1.0).unwrap() <= 1.0);
        }
    }
}
