//! Single-channel raster container and the patch primitives built on it.
//!
//! Pixels are stored row-major as `f64` regardless of the source bit depth.
//! Every image carries a [`ValueDomain`] tag; bounded domains are checked at
//! construction, while intermediate results of arithmetic (noisy states,
//! residuals, guidance terms) are tagged [`ValueDomain::Unbounded`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueDomain {
    /// `[-1, 1]`, the convention the diffusion model is trained in.
    Normalized,
    /// `[0, 65535]`, raw sensor counts.
    Raw16,
    /// `[0, 1]`, used for metric evaluation.
    Unit,
    /// No bounds. Working states of the sampler and operator outputs.
    Unbounded,
}

impl ValueDomain {
    pub fn bounds(self) -> Option<(f64, f64)> {
        match self {
            ValueDomain::Normalized => Some((-1.0, 1.0)),
            ValueDomain::Raw16 => Some((0.0, 65535.0)),
            ValueDomain::Unit => Some((0.0, 1.0)),
            ValueDomain::Unbounded => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ValueDomain::Normalized => "normalized",
            ValueDomain::Raw16 => "raw16",
            ValueDomain::Unit => "unit",
            ValueDomain::Unbounded => "unbounded",
        }
    }

    fn contains(self, v: f64) -> bool {
        match self.bounds() {
            Some((lo, hi)) => v >= lo && v <= hi,
            None => !v.is_nan(),
        }
    }
}

impl fmt::Display for ValueDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ValueDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(ValueDomain::Normalized),
            "raw16" => Ok(ValueDomain::Raw16),
            "unit" => Ok(ValueDomain::Unit),
            "unbounded" => Ok(ValueDomain::Unbounded),
            other => Err(Error::InvalidArgument(format!(
                "unknown value domain '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThermalImage {
    width: usize,
    height: usize,
    domain: ValueDomain,
    data: Vec<f64>,
}

impl ThermalImage {
    pub fn new(width: usize, height: usize, domain: ValueDomain, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image extent must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !domain.contains(**v)) {
            return Err(Error::InvalidArgument(format!(
                "value {v} outside the {domain} domain"
            )));
        }
        Ok(Self {
            width,
            height,
            domain,
            data,
        })
    }

    /// Unbounded image of zeros.
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, ValueDomain::Unbounded, 0.0)
    }

    pub fn filled(width: usize, height: usize, domain: ValueDomain, value: f64) -> Self {
        assert!(width > 0 && height > 0, "image extent must be positive");
        assert!(domain.contains(value), "fill value outside domain");
        Self {
            width,
            height,
            domain,
            data: vec![value; width * height],
        }
    }

    /// Builds an unbounded image from a per-pixel function of `(x, y)`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "image extent must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            domain: ValueDomain::Unbounded,
            data,
        }
    }

    pub(crate) fn from_raw_unbounded(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            domain: ValueDomain::Unbounded,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(width, height)`.
    pub fn extent(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn domain(&self) -> ValueDomain {
        self.domain
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable pixel access. Drops the domain tag to `Unbounded`, since the
    /// caller may write anything.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.domain = ValueDomain::Unbounded;
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.domain = ValueDomain::Unbounded;
        self.data[y * self.width + x] = v;
    }

    /// Re-tags the image, checking every value against the new domain.
    pub fn with_domain(self, domain: ValueDomain) -> Result<Self> {
        Self::new(self.width, self.height, domain, self.data)
    }

    /// Clips every value into `domain` and tags the result with it.
    pub fn clamp_to(&self, domain: ValueDomain) -> Self {
        let data = match domain.bounds() {
            Some((lo, hi)) => self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
            None => self.data.clone(),
        };
        Self {
            width: self.width,
            height: self.height,
            domain,
            data,
        }
    }

    pub fn ensure_extent(&self, expected: (usize, usize)) -> Result<()> {
        if self.extent() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: self.extent(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw_unbounded(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        other.ensure_extent(self.extent())?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_raw_unbounded(self.width, self.height, data))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        other.ensure_extent(self.extent())?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population variance (mean squared deviation).
    pub fn variance(&self) -> f64 {
        variance(&self.data)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Population variance. Values are shifted by the first sample first, so a
/// constant input gives exactly zero.
pub fn variance(values: &[f64]) -> f64 {
    let Some(&first) = values.first() else {
        return 0.0;
    };
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v - first).sum::<f64>() / n;
    values.iter().map(|v| (v - first - mean).powi(2)).sum::<f64>() / n
}

/// Affine map between two bounded domains.
///
/// Fails when either side is `Unbounded`, which has no bounds to map between.
pub fn normalize(img: &ThermalImage, target: ValueDomain) -> Result<ThermalImage> {
    let (src_lo, src_hi) = img.domain.bounds().ok_or_else(|| {
        Error::InvalidArgument("cannot normalize from the unbounded domain".into())
    })?;
    let (dst_lo, dst_hi) = target.bounds().ok_or_else(|| {
        Error::InvalidArgument("cannot normalize into the unbounded domain".into())
    })?;
    let scale = (dst_hi - dst_lo) / (src_hi - src_lo);
    let data = img
        .data
        .iter()
        .map(|&v| ((v - src_lo) * scale + dst_lo).clamp(dst_lo, dst_hi))
        .collect();
    ThermalImage::new(img.width, img.height, target, data)
}

/// Per-image min-max stretch onto `target`. Returns the stretched image and
/// the `(min, max)` source range. A constant image maps to the domain
/// midpoint.
pub fn stretch(img: &ThermalImage, target: ValueDomain) -> Result<(ThermalImage, (f64, f64))> {
    let (dst_lo, dst_hi) = target.bounds().ok_or_else(|| {
        Error::InvalidArgument("cannot stretch into the unbounded domain".into())
    })?;
    let (lo, hi) = img.min_max();
    let data = if hi > lo {
        let scale = (dst_hi - dst_lo) / (hi - lo);
        img.data
            .iter()
            .map(|&v| ((v - lo) * scale + dst_lo).clamp(dst_lo, dst_hi))
            .collect()
    } else {
        vec![0.5 * (dst_lo + dst_hi); img.data.len()]
    };
    Ok((ThermalImage::new(img.width, img.height, target, data)?, (lo, hi)))
}

/// Inverse of [`stretch`]: maps `target`-domain values back onto `range`.
pub fn unstretch(img: &ThermalImage, range: (f64, f64)) -> Result<ThermalImage> {
    let (lo, hi) = img.domain.bounds().ok_or_else(|| {
        Error::InvalidArgument("cannot unstretch from the unbounded domain".into())
    })?;
    let scale = (range.1 - range.0) / (hi - lo);
    Ok(img.map(|v| (v - lo) * scale + range.0))
}

/// Mirror index without repeating the edge sample (`-1 -> 1`, `n -> n-2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// A square tile cut out of an image, remembering where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRef {
    pub origin_x: isize,
    pub origin_y: isize,
    pub size: usize,
    pub data: Vec<f64>,
}

impl PatchRef {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.size + x]
    }
}

/// Copies a `ps x ps` tile whose top-left corner is `origin`; reads outside
/// the image are reflect-padded.
pub fn extract_patch(img: &ThermalImage, origin: (isize, isize), ps: usize) -> Result<PatchRef> {
    if ps == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    if ps > 2 * img.width || ps > 2 * img.height {
        return Err(Error::InvalidArgument(format!(
            "patch size {ps} exceeds twice the image extent {}x{}",
            img.width, img.height
        )));
    }
    let cols: Vec<usize> = (0..ps as isize)
        .map(|dx| reflect_index(origin.0 + dx, img.width))
        .collect();
    let mut data = Vec::with_capacity(ps * ps);
    for dy in 0..ps as isize {
        let row = reflect_index(origin.1 + dy, img.height) * img.width;
        data.extend(cols.iter().map(|&c| img.data[row + c]));
    }
    Ok(PatchRef {
        origin_x: origin.0,
        origin_y: origin.1,
        size: ps,
        data,
    })
}

/// Adds `window * patch` into `accumulator` and `window` into `weight_map`.
/// Parts of the patch that fall outside the image are dropped.
pub fn insert_weighted(
    accumulator: &mut ThermalImage,
    weight_map: &mut ThermalImage,
    patch: &PatchRef,
    window: &[f64],
) -> Result<()> {
    weight_map.ensure_extent(accumulator.extent())?;
    let ps = patch.size;
    if window.len() != ps * ps || patch.data.len() != ps * ps {
        return Err(Error::InvalidArgument(format!(
            "window/patch length does not match patch size {ps}"
        )));
    }
    let (w, h) = accumulator.extent();
    accumulator.domain = ValueDomain::Unbounded;
    weight_map.domain = ValueDomain::Unbounded;
    for dy in 0..ps {
        let y = patch.origin_y + dy as isize;
        if y < 0 || y >= h as isize {
            continue;
        }
        for dx in 0..ps {
            let x = patch.origin_x + dx as isize;
            if x < 0 || x >= w as isize {
                continue;
            }
            let k = y as usize * w + x as usize;
            let wv = window[dy * ps + dx];
            accumulator.data[k] += wv * patch.data[dy * ps + dx];
            weight_map.data[k] += wv;
        }
    }
    Ok(())
}

fn cubic_weight(t: f64) -> f64 {
    // Keys kernel, a = -0.5.
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

fn cubic_taps(out_len: usize, in_len: usize, factor: usize) -> Vec<[(usize, f64); 4]> {
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let base = src.floor();
            let mut taps = [(0usize, 0.0f64); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let i = base as isize - 1 + k as isize;
                let idx = i.clamp(0, in_len as isize - 1) as usize;
                *tap = (idx, cubic_weight(src - i as f64));
            }
            taps
        })
        .collect()
}

/// Separable bicubic upsampling by an integer factor, pixel-center aligned,
/// edge samples replicated.
pub fn upsample_bicubic(img: &ThermalImage, factor: usize) -> ThermalImage {
    assert!(factor >= 1, "upsampling factor must be positive");
    let (w, h) = img.extent();
    let (ow, oh) = (w * factor, h * factor);
    let xt = cubic_taps(ow, w, factor);
    let yt = cubic_taps(oh, h, factor);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for (ox, taps) in xt.iter().enumerate() {
            rows[y * ow + ox] = taps.iter().map(|&(i, c)| c * img.get(i, y)).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for (oy, taps) in yt.iter().enumerate() {
        for ox in 0..ow {
            out[oy * ow + ox] = taps.iter().map(|&(i, c)| c * rows[i * ow + ox]).sum();
        }
    }
    ThermalImage::from_raw_unbounded(ow, oh, out)
}
