//! Paired training data: crop extraction, coarse-band simulation, splitting,
//! and a seeded synthetic scene generator with a known band relationship.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, MultiBandRaster};

/// Source band order inside `z`.
pub const SOURCE_BANDS: [&str; 3] = ["G", "R", "NIR"];
pub const TARGET_BAND: &str = "SWIR";
pub const DEFAULT_COARSE_FACTOR: usize = 4;
pub const DEFAULT_CROP: usize = 64;
pub const DEFAULT_STRIDE: usize = 16;

/// One training sample: `z` is `[1, 3, s, s]`, `y` and `y_tilde` are `[1, 1, s, s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedCrop {
    pub z: Tensor<f32>,
    pub y: Tensor<f32>,
    pub y_tilde: Tensor<f32>,
    pub origin: (usize, usize),
    pub scene: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Debug)]
pub struct CropDataset {
    pub crops: Vec<PairedCrop>,
    pub split: Split,
    pub seed: u64,
}

/// Stacked tensors for a set of crops.
#[derive(Clone, Debug)]
pub struct CropBatch {
    pub z: Tensor<f32>,
    pub y: Tensor<f32>,
    pub y_tilde: Tensor<f32>,
}

impl CropDataset {
    pub fn new(crops: Vec<PairedCrop>) -> Self {
        CropDataset {
            crops,
            split: Split::All,
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }

    /// Appends another dataset, renumbering its scene ids after ours.
    pub fn extend(&mut self, other: CropDataset) {
        let offset = self.crops.iter().map(|c| c.scene + 1).max().unwrap_or(0);
        self.crops.extend(other.crops.into_iter().map(|mut c| {
            c.scene += offset;
            c
        }));
    }

    pub fn batch(&self, indices: &[usize]) -> CropBatch {
        let pick = |f: fn(&PairedCrop) -> &Tensor<f32>| {
            let parts: Vec<&Tensor<f32>> = indices.iter().map(|&i| f(&self.crops[i])).collect();
            Tensor::stack(&parts).expect("crops share dimensions")
        };
        CropBatch {
            z: pick(|c| &c.z),
            y: pick(|c| &c.y),
            y_tilde: pick(|c| &c.y_tilde),
        }
    }
}

/// Window origins along one axis: stride progression plus a final clamped origin.
pub fn window_origins(len: usize, size: usize, stride: usize) -> Result<Vec<usize>> {
    if size > len || size == 0 {
        return Err(Error::CropLargerThanScene {
            crop: size,
            rows: len,
            cols: len,
        });
    }
    let stride = stride.max(1);
    let last = len - size;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().expect("nonempty") != last {
        out.push(last);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct CropOptions {
    pub size: usize,
    pub stride: usize,
    /// Coarse factor used to simulate `y_tilde` when no coarse band is supplied.
    pub factor: usize,
}

impl Default for CropOptions {
    fn default() -> Self {
        CropOptions {
            size: DEFAULT_CROP,
            stride: DEFAULT_STRIDE,
            factor: DEFAULT_COARSE_FACTOR,
        }
    }
}

fn window_plane(plane: &[f32], cols: usize, row: usize, col: usize, size: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(size * size);
    for r in row..row + size {
        out.extend_from_slice(&plane[r * cols + col..r * cols + col + size]);
    }
    out
}

/// Coarse-band integer factor implied by a full-resolution and a coarse raster.
pub fn coarse_factor(full: (usize, usize), coarse: (usize, usize)) -> Result<usize> {
    let mismatch = || {
        Error::DimensionMismatch(format!(
            "coarse band {}x{} is not an integer reduction of {}x{}",
            coarse.0, coarse.1, full.0, full.1
        ))
    };
    if coarse.0 == 0 || full.0 % coarse.0 != 0 {
        return Err(mismatch());
    }
    let f = full.0 / coarse.0;
    if coarse.1 * f != full.1 {
        return Err(mismatch());
    }
    Ok(f)
}

/// Cuts paired crops out of a scene.
///
/// `source` must carry G, R and NIR; `target` carries SWIR. Without a coarse
/// band, each crop's `y_tilde` is `upsample(downsample(y, f), f)`.
pub fn extract_paired_crops(
    source: &MultiBandRaster,
    target: &MultiBandRaster,
    coarse: Option<&MultiBandRaster>,
    opts: CropOptions,
) -> Result<CropDataset> {
    if source.dims() != target.dims() {
        return Err(Error::DimensionMismatch(format!(
            "source {:?} vs target {:?}",
            source.dims(),
            target.dims()
        )));
    }
    let (rows, cols) = source.dims();
    if opts.size > rows || opts.size > cols {
        return Err(Error::CropLargerThanScene {
            crop: opts.size,
            rows,
            cols,
        });
    }
    let bands: Vec<&[f32]> = SOURCE_BANDS.iter().map(|b| source.band(b)).collect::<Result<_>>()?;
    let swir = target.band(TARGET_BAND)?;
    let upsampled = match coarse {
        Some(c) => {
            let f = coarse_factor((rows, cols), c.dims())?;
            Some(upsample(c.band(TARGET_BAND)?, c.rows(), c.cols(), f)?)
        }
        None => {
            if opts.size % opts.factor != 0 {
                return Err(Error::NonDivisibleDims {
                    rows: opts.size,
                    cols: opts.size,
                    factor: opts.factor,
                });
            }
            None
        }
    };
    let s = opts.size;
    let mut crops = Vec::new();
    for &r in &window_origins(rows, s, opts.stride)? {
        for &c in &window_origins(cols, s, opts.stride)? {
            let mut z = Vec::with_capacity(3 * s * s);
            for b in &bands {
                z.extend(window_plane(b, cols, r, c, s));
            }
            let y = window_plane(swir, cols, r, c, s);
            let y_tilde = match &upsampled {
                Some(up) => window_plane(up, cols, r, c, s),
                None => simulate_coarse(&y, s, s, opts.factor)?,
            };
            crops.push(PairedCrop {
                z: Tensor::from_vec([1, 3, s, s], z)?,
                y: Tensor::from_vec([1, 1, s, s], y)?,
                y_tilde: Tensor::from_vec([1, 1, s, s], y_tilde)?,
                origin: (r, c),
                scene: 0,
            });
        }
    }
    Ok(CropDataset::new(crops))
}

/// Area-average pooling over `f x f` blocks.
pub fn downsample<T: Real>(plane: &[T], rows: usize, cols: usize, f: usize) -> Result<Vec<T>> {
    if f == 0 || rows % f != 0 || cols % f != 0 {
        return Err(Error::NonDivisibleDims { rows, cols, factor: f });
    }
    let (ro, co) = (rows / f, cols / f);
    let norm = T::one() / T::of((f * f) as f64);
    let mut out = vec![T::zero(); ro * co];
    for r in 0..rows {
        for c in 0..cols {
            out[(r / f) * co + c / f] += plane[r * cols + c];
        }
    }
    out.iter_mut().for_each(|v| *v *= norm);
    Ok(out)
}

fn cubic_weight(t: f64) -> f64 {
    // Catmull-Rom (a = -0.5)
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for each output index of a 1-D cubic resampling.
fn cubic_taps(len_in: usize, f: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..len_in * f)
        .map(|i| {
            let x = (i as f64 + 0.5) / f as f64 - 0.5;
            let base = x.floor();
            let frac = x - base;
            let mut idx = [0; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let offset = k as f64 - 1.0;
                let src = (base + offset).clamp(0.0, (len_in - 1) as f64) as usize;
                idx[k] = src;
                w[k] = cubic_weight(frac - offset);
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic upsampling by an integer factor, edge pixels replicated.
pub fn upsample<T: Real>(plane: &[T], rows: usize, cols: usize, f: usize) -> Result<Vec<T>> {
    if !plane.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("upsample input"));
    }
    if f == 1 {
        return Ok(plane.to_vec());
    }
    let (ro, co) = (rows * f, cols * f);
    let col_taps = cubic_taps(cols, f);
    let row_taps = cubic_taps(rows, f);
    let mut wide = vec![0.0f64; rows * co];
    for r in 0..rows {
        let src = &plane[r * cols..(r + 1) * cols];
        for (c, (idx, w)) in col_taps.iter().enumerate() {
            wide[r * co + c] = (0..4).map(|k| w[k] * src[idx[k]].f64()).sum();
        }
    }
    let mut out = Vec::with_capacity(ro * co);
    for (idx, w) in &row_taps {
        for c in 0..co {
            let v: f64 = (0..4).map(|k| w[k] * wide[idx[k] * co + c]).sum();
            out.push(T::of(v));
        }
    }
    Ok(out)
}

/// `upsample(downsample(plane, f), f)`.
pub fn simulate_coarse<T: Real>(plane: &[T], rows: usize, cols: usize, f: usize) -> Result<Vec<T>> {
    let small = downsample(plane, rows, cols, f)?;
    upsample(&small, rows / f, cols / f, f)
}

/// Output of [`synth_scene`]: rasters plus the masks the target was built from.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    /// Bands G, R, NIR.
    pub source: MultiBandRaster,
    /// Band SWIR.
    pub target: MultiBandRaster,
    pub water: BinaryMask,
    pub bright: BinaryMask,
}

impl SyntheticScene {
    /// Coarse SWIR at `1/f` resolution.
    pub fn coarse(&self, f: usize) -> Result<MultiBandRaster> {
        let (rows, cols) = self.target.dims();
        let small = downsample(self.target.band(TARGET_BAND)?, rows, cols, f)?;
        MultiBandRaster::single(TARGET_BAND, rows / f, cols / f, small)
    }
}

/// Coefficients of the synthetic band relationship
/// `y = blur3(clip(g*G + r*R + n*NIR + water*W + bright*B, 0, 1))`.
#[derive(Clone, Copy, Debug)]
pub struct SceneModel {
    pub g: f32,
    pub r: f32,
    pub nir: f32,
    pub water: f32,
    pub bright: f32,
}

pub const SCENE_MODEL: SceneModel = SceneModel {
    g: 0.10,
    r: 0.35,
    nir: 0.55,
    water: -0.5,
    bright: 0.2,
};

struct Field {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Field {
    fn new(rows: usize, cols: usize) -> Self {
        Field {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Sum of a few random low-frequency sinusoids scaled to roughly `[0, 1]`.
    fn smooth(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut f = Field::new(rows, cols);
        let waves: Vec<(f32, f32, f32, f32)> = (0..4)
            .map(|_| {
                let angle = rng.random_range(0.0..std::f32::consts::TAU);
                let period = rng.random_range(48.0..220.0f32);
                let k = std::f32::consts::TAU / period;
                (k * angle.cos(), k * angle.sin(), rng.random_range(0.0..std::f32::consts::TAU), rng.random_range(0.5..1.0f32))
            })
            .collect();
        let total: f32 = waves.iter().map(|w| w.3).sum();
        for r in 0..rows {
            for c in 0..cols {
                let v: f32 = waves
                    .iter()
                    .map(|&(kx, ky, ph, amp)| amp * (kx * c as f32 + ky * r as f32 + ph).sin())
                    .sum();
                f.data[r * cols + c] = 0.5 + 0.5 * v / total;
            }
        }
        f
    }

    /// Zero-mean fine texture: white noise smoothed by a 3x3 box.
    fn texture(rows: usize, cols: usize, amplitude: f32, rng: &mut ChaCha8Rng) -> Self {
        let mut noise = Field::new(rows, cols);
        noise.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0f32));
        let mut out = noise.box3();
        out.data.iter_mut().for_each(|v| *v *= amplitude * 1.7);
        out
    }

    fn box3(&self) -> Self {
        box_blur3(&self.data, self.rows, self.cols)
    }
}

fn box_blur3(data: &[f32], rows: usize, cols: usize) -> Field {
    let mut out = Field::new(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for dr in [-1isize, 0, 1] {
                for dc in [-1isize, 0, 1] {
                    let rr = (r as isize + dr).clamp(0, rows as isize - 1) as usize;
                    let cc = (c as isize + dc).clamp(0, cols as isize - 1) as usize;
                    acc += data[rr * cols + cc];
                }
            }
            out.data[r * cols + c] = acc / 9.0;
        }
    }
    out
}

fn paint_disk(mask: &mut BinaryMask, cr: f32, cc: f32, radius: f32) {
    let r0 = (cr - radius).floor().max(0.0) as usize;
    let r1 = ((cr + radius).ceil() as usize).min(mask.rows() - 1);
    let c0 = (cc - radius).floor().max(0.0) as usize;
    let c1 = ((cc + radius).ceil() as usize).min(mask.cols() - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let (dr, dc) = (r as f32 - cr, c as f32 - cc);
            if dr * dr + dc * dc <= radius * radius {
                mask.set(r, c, true);
            }
        }
    }
}

fn paint_rect(mask: &mut BinaryMask, r0: usize, c0: usize, h: usize, w: usize) {
    for r in r0..(r0 + h).min(mask.rows()) {
        for c in c0..(c0 + w).min(mask.cols()) {
            mask.set(r, c, true);
        }
    }
}

fn paint_river(mask: &mut BinaryMask, rng: &mut ChaCha8Rng) {
    let (rows, cols) = (mask.rows() as f32, mask.cols() as f32);
    let width = rng.random_range(1.5..3.5f32);
    let mut r = rng.random_range(0.0..rows);
    let mut c = 0.0f32;
    let mut heading = rng.random_range(-0.6..0.6f32);
    while c < cols {
        paint_disk(mask, r, c, width);
        heading = (heading + rng.random_range(-0.15..0.15f32)).clamp(-1.0, 1.0);
        r = (r + heading.sin()).clamp(0.0, rows - 1.0);
        c += heading.cos().max(0.3);
    }
}

/// Deterministic synthetic scene.
///
/// Land reflectance follows a smooth vegetation field with fine texture;
/// water bodies (disks, rectangles, a river, small ponds) are bright in G and
/// dark in NIR; bright patches are high in every band. The SWIR target is the
/// fixed nonlinear function described by [`SCENE_MODEL`], so water has
/// MNDWI > 0 and land MNDWI < 0 away from mask boundaries.
pub fn synth_scene(seed: u64, rows: usize, cols: usize, factor: usize) -> Result<SyntheticScene> {
    if rows < DEFAULT_CROP || cols < DEFAULT_CROP {
        return Err(Error::BadDims(format!("scene {rows}x{cols} is smaller than {DEFAULT_CROP}x{DEFAULT_CROP}")));
    }
    if factor == 0 || rows % factor != 0 || cols % factor != 0 {
        return Err(Error::BadDims(format!("scene {rows}x{cols} not divisible by coarse factor {factor}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let area = (rows * cols) as f32 / (256.0 * 256.0);
    let count = |base: f32, rng: &mut ChaCha8Rng| -> usize {
        let n = base * area;
        n.floor() as usize + usize::from(rng.random_range(0.0..1.0f32) < n.fract())
    };

    let veg = Field::smooth(rows, cols, &mut rng);
    let shade = Field::smooth(rows, cols, &mut rng);
    let textures: Vec<Field> = (0..3).map(|_| Field::texture(rows, cols, 0.02, &mut rng)).collect();

    let mut water = BinaryMask::empty(rows, cols);
    for _ in 0..count(3.0, &mut rng) {
        let radius = rng.random_range(6.0..26.0f32);
        paint_disk(&mut water, rng.random_range(0.0..rows as f32), rng.random_range(0.0..cols as f32), radius);
    }
    for _ in 0..count(2.0, &mut rng) {
        let (h, w) = (rng.random_range(6..40usize), rng.random_range(6..40usize));
        paint_rect(&mut water, rng.random_range(0..rows), rng.random_range(0..cols), h, w);
    }
    for _ in 0..count(1.0, &mut rng).max(1) {
        paint_river(&mut water, &mut rng);
    }
    for _ in 0..count(12.0, &mut rng) {
        let radius = rng.random_range(2.0..4.5f32);
        paint_disk(&mut water, rng.random_range(0.0..rows as f32), rng.random_range(0.0..cols as f32), radius);
    }

    let mut bright = BinaryMask::empty(rows, cols);
    for _ in 0..count(2.0, &mut rng) {
        let radius = rng.random_range(8.0..22.0f32);
        paint_disk(&mut bright, rng.random_range(0.0..rows as f32), rng.random_range(0.0..cols as f32), radius);
    }
    for _ in 0..count(14.0, &mut rng) {
        let (h, w) = (rng.random_range(2..7usize), rng.random_range(2..7usize));
        paint_rect(&mut bright, rng.random_range(0..rows), rng.random_range(0..cols), h, w);
    }
    for i in 0..rows * cols {
        if bright.data()[i] {
            water.set(i / cols, i % cols, false);
        }
    }

    let n = rows * cols;
    let (mut g, mut red, mut nir) = (vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]);
    for i in 0..n {
        let (tg, tr, tn) = (textures[0].data[i], textures[1].data[i], textures[2].data[i]);
        let v = veg.data[i];
        let s = shade.data[i];
        let (gv, rv, nv) = if bright.data()[i] {
            let base = 0.62 + 0.2 * s;
            (base + tg, base + 0.02 + tr, base + 0.04 + tn)
        } else if water.data()[i] {
            (0.30 + 0.10 * s + tg, 0.17 + 0.04 * s + tr, 0.05 + 0.5 * tn)
        } else {
            (0.06 + 0.06 * (1.0 - v) + tg, 0.12 + 0.18 * (1.0 - v) + tr, 0.30 + 0.30 * v + tn)
        };
        g[i] = gv.clamp(0.0, 1.0);
        red[i] = rv.clamp(0.0, 1.0);
        nir[i] = nv.clamp(0.0, 1.0);
    }
    let target = scene_target(&g, &red, &nir, &water, &bright, SCENE_MODEL);
    Ok(SyntheticScene {
        source: MultiBandRaster::from_planes(vec![("G", g), ("R", red), ("NIR", nir)], rows, cols)?,
        target: MultiBandRaster::single(TARGET_BAND, rows, cols, target)?,
        water,
        bright,
    })
}

fn scene_target(g: &[f32], r: &[f32], nir: &[f32], water: &BinaryMask, bright: &BinaryMask, m: SceneModel) -> Vec<f32> {
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let lin: Vec<f32> = (0..g.len())
        .map(|i| {
            (m.g * g[i] + m.r * r[i] + m.nir * nir[i] + m.water * flag(water.data()[i]) + m.bright * flag(bright.data()[i]))
                .clamp(0.0, 1.0)
        })
        .collect();
    box_blur3(&lin, water.rows(), water.cols()).data
}

/// Deterministic proportional split into train/val/test.
///
/// Each part gets `floor(fraction * n)` crops; the remainder is dealt
/// round-robin starting with train.
pub fn split_dataset(data: &CropDataset, fractions: [f64; 3], seed: u64) -> Result<(CropDataset, CropDataset, CropDataset)> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::BadFractions(fractions));
    }
    let n = data.len();
    let mut sizes: Vec<usize> = fractions.iter().map(|f| (f * n as f64 + 1e-9).floor() as usize).collect();
    let mut k = 0;
    while sizes.iter().sum::<usize>() < n {
        if fractions[k % 3] > 0.0 {
            sizes[k % 3] += 1;
        }
        k += 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(3);
    let mut start = 0;
    for (size, split) in sizes.iter().zip([Split::Train, Split::Val, Split::Test]) {
        let mut idx = order[start..start + size].to_vec();
        idx.sort_unstable();
        start += size;
        parts.push(CropDataset {
            crops: idx.iter().map(|&i| data.crops[i].clone()).collect(),
            split,
            seed,
        });
    }
    let test = parts.pop().expect("three parts");
    let val = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    Ok((train, val, test))
}

/// One line of a crop manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub scene: PathBuf,
    pub row: usize,
    pub col: usize,
}

/// Tab-separated `scene<TAB>row<TAB>col` lines; `#` starts a comment.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("# scene\trow\tcol\n");
    for e in entries {
        text.push_str(&format!("{}\t{}\t{}\n", e.scene.display(), e.row, e.col));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|line| {
            let mut parts = line.split('\t');
            let bad = || Error::Malformed {
                what: "manifest line",
                detail: line.to_string(),
            };
            let scene = PathBuf::from(parts.next().ok_or_else(bad)?);
            let row = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let col = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            Ok(ManifestEntry { scene, row, col })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn blank(rows: usize, cols: usize) -> (MultiBandRaster, MultiBandRaster) {
        let src = MultiBandRaster::from_planes(
            SOURCE_BANDS.iter().map(|b| (*b, vec![0.2; rows * cols])).collect(),
            rows,
            cols,
        )
        .unwrap();
        let tgt = MultiBandRaster::single(TARGET_BAND, rows, cols, vec![0.4; rows * cols]).unwrap();
        (src, tgt)
    }

    #[test]
    fn crop_counts_and_clamping() {
        let opts = CropOptions::default();
        let (s, t) = blank(64, 64);
        assert_eq!(extract_paired_crops(&s, &t, None, opts).unwrap().len(), 1);
        let (s, t) = blank(96, 64);
        let rows: Vec<usize> = extract_paired_crops(&s, &t, None, opts).unwrap().crops.iter().map(|c| c.origin.0).collect();
        assert_eq!(rows, vec![0, 16, 32]);
        let (s, t) = blank(100, 64);
        let rows: Vec<usize> = extract_paired_crops(&s, &t, None, opts).unwrap().crops.iter().map(|c| c.origin.0).collect();
        assert_eq!(rows, vec![0, 16, 32, 36]);
    }

    #[test]
    fn crop_errors() {
        let (s, _) = blank(64, 64);
        let (_, t) = blank(64, 80);
        assert!(matches!(
            extract_paired_crops(&s, &t, None, CropOptions::default()),
            Err(Error::DimensionMismatch(_))
        ));
        let (s, t) = blank(64, 48);
        assert!(matches!(
            extract_paired_crops(&s, &t, None, CropOptions::default()),
            Err(Error::CropLargerThanScene { .. })
        ));
        let (s, t) = blank(64, 64);
        let bad = MultiBandRaster::single(TARGET_BAND, 15, 16, vec![0.0; 240]).unwrap();
        assert!(extract_paired_crops(&s, &t, Some(&bad), CropOptions::default()).is_err());
    }

    #[test]
    fn external_coarse_band_is_upsampled_then_cropped() {
        let scene = synth_scene(5, 128, 128, 4).unwrap();
        let coarse = scene.coarse(4).unwrap();
        let with = extract_paired_crops(&scene.source, &scene.target, Some(&coarse), CropOptions::default()).unwrap();
        let up = upsample(coarse.plane(0), 32, 32, 4).unwrap();
        let crop = &with.crops[7];
        let (r, c) = crop.origin;
        assert_eq!(crop.y_tilde.data(), window_plane(&up, 128, r, c, 64).as_slice());
    }

    #[test]
    fn downsample_examples() {
        assert_eq!(downsample(&[0.0f64, 1.0, 2.0, 3.0], 2, 2, 2).unwrap(), vec![1.5]);
        assert_eq!(downsample(&[0.7f64; 16], 4, 4, 2).unwrap(), vec![0.7; 4]);
        assert!(matches!(downsample(&[0.0f64; 6], 2, 3, 2), Err(Error::NonDivisibleDims { .. })));
    }

    #[test]
    fn downsample_matches_block_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let plane: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let got = downsample(&plane, 8, 8, 4).unwrap();
        for br in 0..2 {
            for bc in 0..2 {
                let mut acc = 0.0;
                for r in 0..4 {
                    for c in 0..4 {
                        acc += plane[(br * 4 + r) * 8 + bc * 4 + c];
                    }
                }
                assert!((got[br * 2 + bc] - acc / 16.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_examples() {
        let up = upsample(&[0.3f64; 9], 3, 3, 4).unwrap();
        assert!(up.iter().all(|v| (v - 0.3).abs() < 1e-12));
        let plane = [0.1f64, 0.2, 0.3, 0.4];
        assert_eq!(upsample(&plane, 2, 2, 1).unwrap(), plane.to_vec());
        assert!(upsample(&[f64::NAN], 1, 1, 2).is_err());
    }

    #[test]
    fn upsample_preserves_interior_ramp() {
        let (rows, cols, f) = (8, 10, 4);
        let plane: Vec<f64> = (0..rows * cols).map(|i| 0.3 * (i / cols) as f64 + 0.05 * (i % cols) as f64).collect();
        let up = upsample(&plane, rows, cols, f).unwrap();
        let co = cols * f;
        for i in 0..rows * f {
            for j in 0..co {
                let (x, y) = ((j as f64 + 0.5) / f as f64 - 0.5, (i as f64 + 0.5) / f as f64 - 0.5);
                // Interior: all four taps inside the source plane.
                if x >= 1.0 && x <= (cols - 3) as f64 && y >= 1.0 && y <= (rows - 3) as f64 {
                    assert!((up[i * co + j] - (0.3 * y + 0.05 * x)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn synthetic_scene_is_deterministic_and_bounded() {
        let a = synth_scene(9, 128, 96, 4).unwrap();
        let b = synth_scene(9, 128, 96, 4).unwrap();
        assert_eq!(a.source.to_mbr_bytes(), b.source.to_mbr_bytes());
        assert_eq!(a.target.to_mbr_bytes(), b.target.to_mbr_bytes());
        assert!(a.source.data().iter().chain(a.target.data()).all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(synth_scene(1, 32, 64, 4), Err(Error::BadDims(_))));
        assert!(matches!(synth_scene(1, 66, 64, 4), Err(Error::BadDims(_))));
    }

    #[test]
    fn synthetic_target_matches_formula() {
        let s = synth_scene(21, 96, 96, 4).unwrap();
        let (rows, cols) = (96usize, 96usize);
        let g = s.source.band("G").unwrap();
        let r = s.source.band("R").unwrap();
        let nir = s.source.band("NIR").unwrap();
        let lin = |i: usize| -> f64 {
            let w = if s.water.data()[i] { 1.0 } else { 0.0 };
            let b = if s.bright.data()[i] { 1.0 } else { 0.0 };
            (0.10 * g[i] as f64 + 0.35 * r[i] as f64 + 0.55 * nir[i] as f64 - 0.5 * w + 0.2 * b).clamp(0.0, 1.0)
        };
        let y = s.target.plane(0);
        for row in 0..rows {
            for col in 0..cols {
                let mut acc = 0.0;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let rr = (row as i64 + dr).clamp(0, rows as i64 - 1) as usize;
                        let cc = (col as i64 + dc).clamp(0, cols as i64 - 1) as usize;
                        acc += lin(rr * cols + cc);
                    }
                }
                assert!((y[row * cols + col] as f64 - acc / 9.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn synthetic_water_has_positive_mndwi() {
        let s = synth_scene(4, 256, 256, 4).unwrap();
        let (rows, cols) = (256, 256);
        let g = s.source.band("G").unwrap();
        let swir = s.target.plane(0);
        let uniform = |m: &BinaryMask, r: usize, c: usize, want: bool| {
            (r.saturating_sub(1)..=(r + 1).min(rows - 1))
                .all(|rr| (c.saturating_sub(1)..=(c + 1).min(cols - 1)).all(|cc| m.get(rr, cc) == want))
        };
        let (mut water_px, mut land_px) = (0, 0);
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                let index = (g[i] - swir[i]) / (g[i] + swir[i]);
                if !uniform(&s.bright, r, c, false) {
                    continue;
                }
                if uniform(&s.water, r, c, true) {
                    assert!(index > 0.0, "water pixel ({r},{c}) has MNDWI {index}");
                    water_px += 1;
                } else if uniform(&s.water, r, c, false) {
                    assert!(index < 0.0, "land pixel ({r},{c}) has MNDWI {index}");
                    land_px += 1;
                }
            }
        }
        assert!(water_px > 1000 && land_px > 1000);
    }

    #[test]
    fn split_sizes_and_partition() {
        let crops: Vec<PairedCrop> = (0..10)
            .map(|i| PairedCrop {
                z: Tensor::zeros([1, 3, 4, 4]),
                y: Tensor::zeros([1, 1, 4, 4]),
                y_tilde: Tensor::zeros([1, 1, 4, 4]),
                origin: (i, 0),
                scene: 0,
            })
            .collect();
        let data = CropDataset::new(crops);
        let (a, b, c) = split_dataset(&data, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        let (a2, _, _) = split_dataset(&data, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(a.crops, a2.crops);
        let mut rows: Vec<usize> = a.crops.iter().chain(&b.crops).chain(&c.crops).map(|c| c.origin.0).collect();
        rows.sort_unstable();
        assert_eq!(rows, (0..10).collect::<Vec<_>>());
        assert!(matches!(split_dataset(&data, [0.5, 0.1, 0.1], 3), Err(Error::BadFractions(_))));
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ManifestEntry { scene: "scene_000".into(), row: 0, col: 16 },
            ManifestEntry { scene: "scene_001".into(), row: 36, col: 0 },
        ];
        let path = dir.path().join("manifest.txt");
        write_manifest(&path, &entries).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn crops_stay_in_bounds_and_cover(rows in 64usize..140, cols in 64usize..140, stride in 1usize..64) {
            let rs = window_origins(rows, 64, stride).unwrap();
            let cs = window_origins(cols, 64, stride).unwrap();
            prop_assert!(rs.iter().all(|&r| r + 64 <= rows));
            prop_assert!(cs.iter().all(|&c| c + 64 <= cols));
            let mut covered = vec![false; rows];
            for &r in &rs { for v in covered.iter_mut().skip(r).take(64) { *v = true; } }
            prop_assert!(covered.iter().all(|&v| v));
        }

        #[test]
        fn simulated_coarse_matches_pipeline(seed in 0u64..1000) {
            let scene = synth_scene(seed, 64, 64, 4).unwrap();
            let data = extract_paired_crops(&scene.source, &scene.target, None, CropOptions::default()).unwrap();
            let crop = &data.crops[0];
            let expect = upsample(&downsample(crop.y.data(), 64, 64, 4).unwrap(), 16, 16, 4).unwrap();
            prop_assert_eq!(crop.y_tilde.data(), expect.as_slice());
        }
    }
}
