//! Binary PGM (P5) rasters and their plain-text metadata sidecars.
//!
//! Thermal rasters are written as 16-bit P5 with big-endian samples. 8-bit
//! files are accepted on read. The sidecar (`<image>.meta`) records which
//! value domain the samples decode into, the value range spanned by sample
//! `0..=maxval`, and the seed that produced the image.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{ThermalImage, ValueDomain};

/// Refuse headers that would allocate more than this many samples.
const MAX_SAMPLES: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmRaster {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format("PGM header", format!("missing {field}")));
        }
        if self.pos - start > 9 {
            return Err(Error::format("PGM header", format!("{field} too large")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        Ok(text.parse().expect("at most nine digits"))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<PgmRaster> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format("PGM header", "missing P5 magic"));
    }
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format("PGM header", "zero extent"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format("PGM header", format!("maxval {maxval} out of range")));
    }
    match bytes.get(hdr.pos) {
        Some(c) if c.is_ascii_whitespace() => hdr.pos += 1,
        _ => return Err(Error::format("PGM header", "no whitespace after maxval")),
    }
    let count = width
        .checked_mul(height)
        .filter(|&n| n <= MAX_SAMPLES)
        .ok_or_else(|| Error::format("PGM header", "extent too large"))?;
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let raster = &bytes[hdr.pos..];
    if raster.len() < count * bytes_per {
        return Err(Error::format(
            "PGM raster",
            format!("expected {} bytes, found {}", count * bytes_per, raster.len()),
        ));
    }
    let samples: Vec<u16> = if bytes_per == 1 {
        raster[..count].iter().map(|&b| b as u16).collect()
    } else {
        raster[..2 * count]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    if let Some(s) = samples.iter().find(|&&s| s as usize > maxval) {
        return Err(Error::format("PGM raster", format!("sample {s} exceeds maxval {maxval}")));
    }
    Ok(PgmRaster {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub fn encode_pgm(raster: &PgmRaster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", raster.width, raster.height, raster.maxval).into_bytes();
    if raster.maxval < 256 {
        out.extend(raster.samples.iter().map(|&s| s as u8));
    } else {
        for &s in &raster.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    out
}

/// Contents of an image's `.meta` sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetadata {
    pub value_domain: ValueDomain,
    /// Values represented by sample `0` and sample `maxval`.
    pub range: (f64, f64),
    pub seed: Option<u64>,
    /// Raw range the image was stretched from, when it came from sensor data.
    pub source_range: Option<(f64, f64)>,
}

impl ImageMetadata {
    pub fn for_image(img: &ThermalImage, seed: Option<u64>) -> Self {
        let range = match img.domain().bounds() {
            Some(b) => b,
            None => {
                let (lo, hi) = img.min_max();
                if hi > lo {
                    (lo, hi)
                } else {
                    (lo - 0.5, lo + 0.5)
                }
            }
        };
        Self {
            value_domain: img.domain(),
            range,
            seed,
            source_range: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut domain = None;
        let (mut lo, mut hi) = (None, None);
        let (mut src_lo, mut src_hi) = (None, None);
        let mut seed = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::format("metadata", format!("line {}: expected key = value", n + 1)))?;
            let float = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::format("metadata", format!("line {}: bad number '{v}'", n + 1)))
            };
            match key {
                "value_domain" => domain = Some(value.parse::<ValueDomain>()?),
                "range_min" => lo = Some(float(value)?),
                "range_max" => hi = Some(float(value)?),
                "source_min" => src_lo = Some(float(value)?),
                "source_max" => src_hi = Some(float(value)?),
                "seed" => {
                    seed = Some(value.parse::<u64>().map_err(|_| {
                        Error::format("metadata", format!("line {}: bad seed '{value}'", n + 1))
                    })?)
                }
                other => {
                    return Err(Error::format("metadata", format!("line {}: unknown key '{other}'", n + 1)))
                }
            }
        }
        let value_domain = domain.ok_or_else(|| Error::format("metadata", "missing value_domain"))?;
        let range = match (lo, hi) {
            (Some(lo), Some(hi)) if hi > lo => (lo, hi),
            (Some(_), Some(_)) => return Err(Error::format("metadata", "range_max must exceed range_min")),
            (None, None) => value_domain
                .bounds()
                .ok_or_else(|| Error::format("metadata", "unbounded domain needs an explicit range"))?,
            _ => return Err(Error::format("metadata", "range_min and range_max must appear together")),
        };
        if let Some((dlo, dhi)) = value_domain.bounds() {
            if range.0 < dlo || range.1 > dhi {
                return Err(Error::format("metadata", "range exceeds the value domain"));
            }
        }
        let source_range = match (src_lo, src_hi) {
            (Some(a), Some(b)) => Some((a, b)),
            (None, None) => None,
            _ => return Err(Error::format("metadata", "source_min and source_max must appear together")),
        };
        Ok(Self {
            value_domain,
            range,
            seed,
            source_range,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "value_domain = {}", self.value_domain).unwrap();
        writeln!(s, "range_min = {:?}", self.range.0).unwrap();
        writeln!(s, "range_max = {:?}", self.range.1).unwrap();
        if let Some(seed) = self.seed {
            writeln!(s, "seed = {seed}").unwrap();
        }
        if let Some((a, b)) = self.source_range {
            writeln!(s, "source_min = {a:?}").unwrap();
            writeln!(s, "source_max = {b:?}").unwrap();
        }
        s
    }
}

/// Quantizes an image onto 16-bit samples spanning `meta.range`.
pub fn image_to_raster(img: &ThermalImage, meta: &ImageMetadata) -> PgmRaster {
    let (lo, hi) = meta.range;
    let samples = img
        .data()
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)) * 65535.0).round().clamp(0.0, 65535.0) as u16)
        .collect();
    PgmRaster {
        width: img.width(),
        height: img.height(),
        maxval: 65535,
        samples,
    }
}

pub fn raster_to_image(raster: &PgmRaster, meta: &ImageMetadata) -> Result<ThermalImage> {
    let (lo, hi) = meta.range;
    let scale = (hi - lo) / raster.maxval as f64;
    let data = raster
        .samples
        .iter()
        .map(|&s| if s == raster.maxval { hi } else { lo + s as f64 * scale })
        .collect();
    ThermalImage::new(raster.width, raster.height, meta.value_domain, data)
}

pub fn sidecar_path(image_path: &Path) -> PathBuf {
    let mut name = image_path.as_os_str().to_owned();
    name.push(".meta");
    PathBuf::from(name)
}

/// Writes `<path>` and `<path>.meta`.
pub fn write_image(path: &Path, img: &ThermalImage, seed: Option<u64>) -> Result<ImageMetadata> {
    let meta = ImageMetadata::for_image(img, seed);
    write_image_with(path, img, &meta)?;
    Ok(meta)
}

pub fn write_image_with(path: &Path, img: &ThermalImage, meta: &ImageMetadata) -> Result<()> {
    fs::write(path, encode_pgm(&image_to_raster(img, meta)))?;
    fs::write(sidecar_path(path), meta.to_text())?;
    Ok(())
}

/// Reads a PGM and its sidecar. Without a sidecar the samples are scaled
/// onto the `Raw16` domain.
pub fn read_image(path: &Path) -> Result<(ThermalImage, ImageMetadata)> {
    let raster = decode_pgm(&fs::read(path)?)?;
    let side = sidecar_path(path);
    let meta = if side.exists() {
        ImageMetadata::parse(&fs::read_to_string(&side)?)?
    } else {
        ImageMetadata {
            value_domain: ValueDomain::Raw16,
            range: (0.0, 65535.0),
            seed: None,
            source_range: None,
        }
    };
    let img = raster_to_image(&raster, &meta)?;
    Ok((img, meta))
}
