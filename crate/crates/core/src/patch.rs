//! Overlapping tilings and windowed recombination.

use std::f64::consts::PI;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::{extract_patch, PatchRef, ThermalImage, ValueDomain};

/// Added to the raised-cosine profile so border pixels never get zero weight.
pub const WINDOW_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowKind {
    Flat,
    #[default]
    RaisedCosine,
}

impl WindowKind {
    pub fn name(self) -> &'static str {
        match self {
            WindowKind::Flat => "flat",
            WindowKind::RaisedCosine => "raised_cosine",
        }
    }
}

impl FromStr for WindowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(WindowKind::Flat),
            "raised_cosine" | "raised-cosine" | "hann" => Ok(WindowKind::RaisedCosine),
            _ => Err(Error::InvalidArgument(format!("unknown window '{s}'"))),
        }
    }
}

/// Row-major `ps x ps` weights.
pub fn make_window(ps: usize, kind: WindowKind) -> Vec<f64> {
    match kind {
        WindowKind::Flat => vec![1.0; ps * ps],
        WindowKind::RaisedCosine => {
            let mut profile: Vec<f64> = (0..ps)
                .map(|i| (PI * (i as f64 + 0.5) / ps as f64).sin().powi(2) + WINDOW_FLOOR)
                .collect();
            // Mirror so the window is exactly symmetric.
            for i in 0..ps / 2 {
                profile[ps - 1 - i] = profile[i];
            }
            let mut w = Vec::with_capacity(ps * ps);
            for &py in &profile {
                w.extend(profile.iter().map(|&px| px * py));
            }
            w
        }
    }
}

/// Tiling parameters as they appear in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridParams {
    pub patch_size: usize,
    pub stride: usize,
    pub window: WindowKind,
}

impl GridParams {
    /// Half-overlapping raised-cosine tiling.
    pub fn overlapping(patch_size: usize) -> Self {
        Self {
            patch_size,
            stride: (patch_size / 2).max(1),
            window: WindowKind::RaisedCosine,
        }
    }

    /// Abutting flat tiles, the no-overlap ablation.
    pub fn non_overlapping(patch_size: usize) -> Self {
        Self {
            patch_size,
            stride: patch_size,
            window: WindowKind::Flat,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    extent: (usize, usize),
    ps: usize,
    stride: usize,
    origins: Vec<(isize, isize)>,
    window: Vec<f64>,
    kind: WindowKind,
}

/// Lattice `start, start + stride, ...` whose last entry is pulled back so
/// the final tile ends at `len`.
fn axis_origins(len: usize, ps: usize, stride: usize, start: isize) -> Vec<isize> {
    let end = len as isize;
    let ps = ps as isize;
    let mut out = vec![start];
    while out.last().unwrap() + ps < end {
        let next = out.last().unwrap() + stride as isize;
        if next + ps >= end {
            out.push((end - ps).max(start));
            break;
        }
        out.push(next);
    }
    out.dedup();
    out
}

/// Regular tiling that stays inside the image.
pub fn plan_grid(extent: (usize, usize), ps: usize, stride: usize) -> Result<PatchGrid> {
    PatchGrid::new(extent, GridParams { patch_size: ps, stride, window: WindowKind::RaisedCosine }, false)
}

impl PatchGrid {
    /// With `allow_padding`, a patch larger than the image is placed at the
    /// origin and reads past the border are reflected.
    pub fn new(extent: (usize, usize), params: GridParams, allow_padding: bool) -> Result<Self> {
        Self::shifted(extent, params, allow_padding, (0, 0))
    }

    /// Like [`PatchGrid::new`] but with the lattice moved up-left by `shift`
    /// (each component taken modulo the stride). Tiles that start before the
    /// border read reflected pixels.
    pub fn shifted(extent: (usize, usize), params: GridParams, allow_padding: bool, shift: (usize, usize)) -> Result<Self> {
        let GridParams { patch_size: ps, stride, window: kind } = params;
        let (w, h) = extent;
        if w == 0 || h == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        if ps < 2 {
            return Err(Error::InvalidArgument(format!("patch size {ps} below 2")));
        }
        if stride == 0 || stride > ps {
            return Err(Error::InvalidArgument(format!("stride {stride} outside 1..={ps}")));
        }
        let too_big = ps > w || ps > h;
        if too_big && !allow_padding {
            return Err(Error::InvalidArgument(format!("patch size {ps} exceeds image extent {w}x{h}")));
        }
        if ps > 2 * w || ps > 2 * h {
            return Err(Error::InvalidArgument(format!(
                "patch size {ps} exceeds twice the image extent {w}x{h}"
            )));
        }
        let axis = |len: usize, s: usize| {
            if ps >= len {
                vec![0]
            } else {
                let off = (s % stride).min(ps - 1) as isize;
                axis_origins(len, ps, stride, -off)
            }
        };
        let xs = axis(w, shift.0);
        let ys = axis(h, shift.1);
        let mut origins = Vec::with_capacity(xs.len() * ys.len());
        for &y in &ys {
            origins.extend(xs.iter().map(|&x| (x, y)));
        }
        Ok(Self {
            extent,
            ps,
            stride,
            origins,
            window: make_window(ps, kind),
            kind,
        })
    }

    pub fn extent(&self) -> (usize, usize) {
        self.extent
    }

    pub fn patch_size(&self) -> usize {
        self.ps
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn origins(&self) -> &[(isize, isize)] {
        &self.origins
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn window_kind(&self) -> WindowKind {
        self.kind
    }

    pub fn split(&self, img: &ThermalImage) -> Result<Vec<PatchRef>> {
        img.ensure_extent(self.extent)?;
        self.origins.iter().map(|&o| extract_patch(img, o, self.ps)).collect()
    }

    /// Σ_k w_k at every pixel.
    pub fn coverage(&self) -> ThermalImage {
        let (w, h) = self.extent;
        let mut acc = ThermalImage::zeros(w, h);
        for &(ox, oy) in &self.origins {
            for dy in 0..self.ps {
                let y = oy + dy as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in 0..self.ps {
                    let x = ox + dx as isize;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let k = y as usize * w + x as usize;
                    acc.data_mut()[k] += self.window[dy * self.ps + dx];
                }
            }
        }
        acc
    }

    /// Columns (or rows, with `vertical`) adjacent to a tile edge that lies
    /// strictly inside the image.
    fn boundary_lines(&self, vertical: bool) -> Vec<bool> {
        let len = if vertical { self.extent.1 } else { self.extent.0 };
        let mut marks = vec![false; len];
        for &(ox, oy) in &self.origins {
            let o = if vertical { oy } else { ox };
            for edge in [o, o + self.ps as isize] {
                if edge > 0 && edge < len as isize {
                    marks[edge as usize - 1] = true;
                    marks[edge as usize] = true;
                }
            }
        }
        marks
    }
}

/// Per-pixel weighted mean of tile predictions.
///
/// Tiles are accumulated in raster order of their origins regardless of the
/// order they are passed in. Each pixel is accumulated as an offset from the
/// first tile that covers it, and the result is clamped to the range of the
/// contributing values, so equal contributions reproduce their value exactly.
pub fn aggregate(predictions: &[PatchRef], grid: &PatchGrid) -> Result<ThermalImage> {
    if predictions.len() != grid.origins.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for a grid of {} tiles",
            predictions.len(),
            grid.origins.len()
        )));
    }
    let mut order: Vec<&PatchRef> = predictions.iter().collect();
    order.sort_by_key(|p| (p.origin_y, p.origin_x));
    let mut expected = grid.origins.clone();
    expected.sort_by_key(|&(x, y)| (y, x));
    for (p, &(ox, oy)) in order.iter().zip(&expected) {
        if (p.origin_x, p.origin_y) != (ox, oy) || p.size != grid.ps || p.data.len() != grid.ps * grid.ps {
            return Err(Error::InvalidArgument(format!(
                "prediction at ({}, {}) does not match grid tile ({ox}, {oy})",
                p.origin_x, p.origin_y
            )));
        }
    }

    let (w, h) = grid.extent;
    let n = w * h;
    let ps = grid.ps;
    let mut reference = vec![f64::NAN; n];
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    let mut num = vec![0.0; n];
    let mut den = vec![0.0; n];
    for p in order {
        for dy in 0..ps {
            let y = p.origin_y + dy as isize;
            if y < 0 || y >= h as isize {
                continue;
            }
            for dx in 0..ps {
                let x = p.origin_x + dx as isize;
                if x < 0 || x >= w as isize {
                    continue;
                }
                let k = y as usize * w + x as usize;
                let v = p.data[dy * ps + dx];
                let wv = grid.window[dy * ps + dx];
                if reference[k].is_nan() {
                    reference[k] = v;
                }
                num[k] += wv * (v - reference[k]);
                den[k] += wv;
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
    }
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        if den[k] <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "pixel ({}, {}) has zero total window weight",
                k % w,
                k / w
            )));
        }
        out.push((reference[k] + num[k] / den[k]).clamp(lo[k], hi[k]));
    }
    ThermalImage::new(w, h, ValueDomain::Unbounded, out)
}

/// Mean absolute second difference across tile-edge lines minus the same
/// statistic away from them. Positive values indicate visible seams.
pub fn seam_energy(img: &ThermalImage, grid: &PatchGrid) -> Result<f64> {
    img.ensure_extent(grid.extent)?;
    let (w, h) = grid.extent;
    let cols = grid.boundary_lines(false);
    let rows = grid.boundary_lines(true);
    let (mut on, mut on_n, mut off, mut off_n) = (0.0, 0usize, 0.0, 0usize);
    let mut record = |boundary: bool, v: f64| {
        if boundary {
            on += v;
            on_n += 1;
        } else {
            off += v;
            off_n += 1;
        }
    };
    for y in 0..h {
        for x in 1..w.saturating_sub(1) {
            let d = img.get(x - 1, y) - 2.0 * img.get(x, y) + img.get(x + 1, y);
            record(cols[x], d.abs());
        }
    }
    for y in 1..h.saturating_sub(1) {
        for x in 0..w {
            let d = img.get(x, y - 1) - 2.0 * img.get(x, y) + img.get(x, y + 1);
            record(rows[y], d.abs());
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    if on_n == 0 {
        return Ok(0.0);
    }
    Ok(mean(on, on_n) - mean(off, off_n))
}
