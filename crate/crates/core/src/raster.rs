//! Raster data model, the MBR container, normalization and PNG export.
//!
//! MBR layout (all integers little-endian `u32`):
//!
//! ```text
//! "MBR1" | bands | rows | cols | label_len | labels (UTF-8, '\n'-joined) | f32 LE payload
//! ```
//!
//! The payload is plane-major then row-major, `bands * rows * cols` values.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::autodiff::Real;
use crate::error::{Error, Result};

const MBR_MAGIC: &[u8; 4] = b"MBR1";

/// `B` planes of `rows x cols` finite values with one label per plane.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiBandRaster {
    labels: Vec<String>,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl MultiBandRaster {
    pub fn new(labels: Vec<String>, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::DimensionMismatch("raster needs at least one band".into()));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::DimensionMismatch(format!("empty raster {rows}x{cols}")));
        }
        if data.len() != labels.len() * rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} bands of {rows}x{cols} need {} values, got {}",
                labels.len(),
                labels.len() * rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| l.contains('\n')) {
            return Err(Error::Malformed {
                what: "band label",
                detail: format!("{bad:?} contains a newline"),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("raster data"));
        }
        Ok(MultiBandRaster {
            labels,
            rows,
            cols,
            data,
        })
    }

    /// Builds a raster from labelled planes of equal size.
    pub fn from_planes(planes: Vec<(&str, Vec<f32>)>, rows: usize, cols: usize) -> Result<Self> {
        let mut labels = Vec::with_capacity(planes.len());
        let mut data = Vec::with_capacity(planes.len() * rows * cols);
        for (label, plane) in planes {
            if plane.len() != rows * cols {
                return Err(Error::DimensionMismatch(format!(
                    "band {label} has {} values, expected {}",
                    plane.len(),
                    rows * cols
                )));
            }
            labels.push(label.to_string());
            data.extend(plane);
        }
        Self::new(labels, rows, cols, data)
    }

    pub fn single(label: &str, rows: usize, cols: usize, plane: Vec<f32>) -> Result<Self> {
        Self::from_planes(vec![(label, plane)], rows, cols)
    }

    pub fn bands(&self) -> usize {
        self.labels.len()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, band: usize) -> &[f32] {
        let len = self.rows * self.cols;
        &self.data[band * len..(band + 1) * len]
    }

    pub fn band_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownBand(label.to_string()))
    }

    pub fn band(&self, label: &str) -> Result<&[f32]> {
        Ok(self.plane(self.band_index(label)?))
    }

    /// New raster holding the named bands in the given order.
    pub fn select(&self, labels: &[&str]) -> Result<Self> {
        let planes = labels
            .iter()
            .map(|l| Ok((*l, self.band(l)?.to_vec())))
            .collect::<Result<Vec<_>>>()?;
        Self::from_planes(planes, self.rows, self.cols)
    }

    /// Window `[row, row + size) x [col, col + size)` of every band.
    pub fn window(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.rows || col + width > self.cols {
            return Err(Error::DimensionMismatch(format!(
                "window {height}x{width} at ({row},{col}) exceeds {}x{}",
                self.rows, self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.bands() * height * width);
        for b in 0..self.bands() {
            let plane = self.plane(b);
            for r in row..row + height {
                data.extend_from_slice(&plane[r * self.cols + col..r * self.cols + col + width]);
            }
        }
        Self::new(self.labels.clone(), height, width, data)
    }

    pub fn to_mbr_bytes(&self) -> Vec<u8> {
        let label_block = self.labels.join("\n");
        let mut out = Vec::with_capacity(20 + label_block.len() + 4 * self.data.len());
        out.extend_from_slice(MBR_MAGIC);
        for v in [self.bands(), self.rows, self.cols, label_block.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(label_block.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_mbr_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..3] != b"MBR" {
            return Err(Error::MagicMismatch { expected: "MBR" });
        }
        if bytes[3] != b'1' {
            let version = (bytes[3] as char).to_digit(10).ok_or(Error::MagicMismatch { expected: "MBR" })?;
            return Err(Error::UnsupportedVersion(version));
        }
        let mut reader = ByteReader::new(bytes, 4, "MBR header");
        let bands = reader.u32()? as usize;
        let rows = reader.u32()? as usize;
        let cols = reader.u32()? as usize;
        let label_len = reader.u32()? as usize;
        let label_block = reader.take(label_len)?;
        let labels: Vec<String> = std::str::from_utf8(label_block)
            .map_err(|e| Error::Malformed {
                what: "MBR labels",
                detail: e.to_string(),
            })?
            .split('\n')
            .map(str::to_string)
            .collect();
        if labels.len() != bands {
            return Err(Error::Malformed {
                what: "MBR labels",
                detail: format!("{} labels for {bands} bands", labels.len()),
            });
        }
        let count = bands * rows * cols;
        let payload = &bytes[reader.pos..];
        if payload.len() < count * 4 {
            return Err(Error::TruncatedPayload {
                expected: count * 4,
                found: payload.len(),
            });
        }
        let data = payload[..count * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(labels, rows, cols, data)
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], pos: usize, what: &'static str) -> Self {
        ByteReader { bytes, pos, what }
    }

    pub fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len()).ok_or(
            Error::TruncatedPayload {
                expected: self.pos + len,
                found: self.bytes.len(),
            },
        )?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4).map_err(|_| Error::Malformed {
            what: self.what,
            detail: "unexpected end of header".into(),
        })?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.bytes.len()
    }
}

pub fn read_mbr(path: impl AsRef<Path>) -> Result<MultiBandRaster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    MultiBandRaster::from_mbr_bytes(&bytes)
}

pub fn write_mbr(raster: &MultiBandRaster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, raster.to_mbr_bytes()).map_err(|e| Error::io(path, e))
}

/// Binary `rows x cols` mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "mask {rows}x{cols} with {} values",
                data.len()
            )));
        }
        Ok(BinaryMask { rows, cols, data })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        BinaryMask {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn window(&self, row: usize, col: usize, height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in row..row + height {
            data.extend_from_slice(&self.data[r * self.cols + col..r * self.cols + col + width]);
        }
        BinaryMask {
            rows: height,
            cols: width,
            data,
        }
    }

    pub fn to_raster(&self, label: &str) -> MultiBandRaster {
        let plane = self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        MultiBandRaster::single(label, self.rows, self.cols, plane).expect("mask dims are valid")
    }

    /// Reads plane 0 of a raster, treating values above 0.5 as set.
    pub fn from_raster(raster: &MultiBandRaster) -> Self {
        BinaryMask {
            rows: raster.rows(),
            cols: raster.cols(),
            data: raster.plane(0).iter().map(|&v| v > 0.5).collect(),
        }
    }
}

/// `(v - min) / (max - min)`; a constant plane maps to all zeros.
pub fn normalize_unit<T: Real>(plane: &[T]) -> Result<Vec<T>> {
    if plane.is_empty() {
        return Ok(Vec::new());
    }
    if !plane.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("normalize_unit input"));
    }
    let (min, max) = plane
        .iter()
        .fold((plane[0], plane[0]), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if max == min {
        return Ok(vec![T::zero(); plane.len()]);
    }
    let range = max - min;
    Ok(plane.iter().map(|&v| (v - min) / range).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleMode {
    /// Divide by `2^n - 1` and clamp.
    BitDepth(u32),
    /// Joint min-max over all bands.
    SceneMinMax,
}

impl std::str::FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "minmax" || s == "per-scene-minmax" {
            return Ok(ScaleMode::SceneMinMax);
        }
        s.strip_prefix("bitdepth")
            .map(|d| d.trim_start_matches([':', '(']).trim_end_matches(')'))
            .and_then(|d| d.parse().ok())
            .filter(|&d: &u32| (1..=32).contains(&d))
            .map(ScaleMode::BitDepth)
            .ok_or_else(|| Error::Config(format!("unknown scaling mode {s:?}")))
    }
}

pub fn radiometric_scale(raster: &MultiBandRaster, mode: ScaleMode) -> Result<MultiBandRaster> {
    let data = match mode {
        ScaleMode::BitDepth(bits) => {
            let full = (2f64.powi(bits as i32) - 1.0) as f32;
            raster.data.iter().map(|&v| (v / full).clamp(0.0, 1.0)).collect()
        }
        ScaleMode::SceneMinMax => normalize_unit(&raster.data)?,
    };
    MultiBandRaster::new(raster.labels.clone(), raster.rows, raster.cols, data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stretch {
    None,
    /// Maps the `lo`/`hi` percentiles of each band to 0/255.
    Percentile(f64, f64),
}

impl Stretch {
    pub const DEFAULT_PERCENTILE: Stretch = Stretch::Percentile(2.0, 98.0);
}

/// Nearest-rank percentile of an unsorted slice.
pub fn percentile(values: &[f32], pct: f64) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = ((pct / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

fn to_u8(plane: &[f32], stretch: Stretch) -> Vec<u8> {
    let (lo, hi) = match stretch {
        Stretch::None => (0.0, 1.0),
        Stretch::Percentile(a, b) => (percentile(plane, a), percentile(plane, b)),
    };
    let range = hi - lo;
    plane
        .iter()
        .map(|&v| {
            let t = if range > 0.0 { (v - lo) / range } else { 0.0 };
            (t.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

/// Writes an 8-bit PNG: grayscale for one label, RGB for three.
pub fn export_png(raster: &MultiBandRaster, combo: &[&str], stretch: Stretch, path: impl AsRef<Path>) -> Result<()> {
    if combo.len() != 1 && combo.len() != 3 {
        return Err(Error::Config(format!("band combination needs 1 or 3 labels, got {}", combo.len())));
    }
    let planes: Vec<Vec<u8>> = combo
        .iter()
        .map(|l| Ok(to_u8(raster.band(l)?, stretch)))
        .collect::<Result<_>>()?;
    let pixels = raster.rows * raster.cols;
    let mut buf = Vec::with_capacity(pixels * planes.len());
    for i in 0..pixels {
        for p in &planes {
            buf.push(p[i]);
        }
    }
    let color = if planes.len() == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    };
    write_png(path.as_ref(), raster.cols as u32, raster.rows as u32, color, &buf)
}

pub(crate) fn write_png(path: &Path, width: u32, height: u32, color: png::ColorType, buf: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width, height);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer.write_image_data(buf).map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))
}
