//! Full-scene inference: overlapping tiles blended with a Gaussian feather
//! mosaic, and the choice of band the attention map is computed from.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::datapipe::{coarse_factor, upsample, window_origins, DEFAULT_CROP, DEFAULT_STRIDE, SOURCE_BANDS, TARGET_BAND};
use crate::error::{Error, Result};
use crate::model::{AttentionVariant, Discriminator, Generator};
use crate::raster::MultiBandRaster;
use crate::training;

/// Window origins covering a `rows x cols` scene with `patch`-sized tiles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub stride: usize,
    pub origins: Vec<(usize, usize)>,
}

/// Origins step by `stride` (at most `patch`, so tiles leave no gaps); the last one in each axis is clamped to the scene edge.
pub fn plan_tiles(rows: usize, cols: usize, patch: usize, stride: usize) -> Result<TilePlan> {
    if patch == 0 || patch > rows || patch > cols {
        return Err(Error::CropLargerThanScene { crop: patch, rows, cols });
    }
    if stride == 0 || stride > patch {
        return Err(Error::Config(format!("tile stride must be in 1..={patch}, got {stride}")));
    }
    let row_origins = window_origins(rows, patch, stride)?;
    let col_origins = window_origins(cols, patch, stride)?;
    let origins = row_origins
        .iter()
        .flat_map(|&r| col_origins.iter().map(move |&c| (r, c)))
        .collect();
    Ok(TilePlan {
        rows,
        cols,
        patch,
        stride,
        origins,
    })
}

impl TilePlan {
    pub fn default_for(rows: usize, cols: usize) -> Result<Self> {
        plan_tiles(rows, cols, DEFAULT_CROP, DEFAULT_STRIDE)
    }
}

/// Separable Gaussian weights centered on the patch, not normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatherWeights {
    pub patch: usize,
    pub sigma: f64,
    data: Vec<f64>,
}

impl FeatherWeights {
    pub fn gaussian(patch: usize, sigma: f64) -> Result<Self> {
        if patch == 0 || !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Config(format!("feather needs patch > 0 and sigma > 0, got {patch} / {sigma}")));
        }
        let center = (patch as f64 - 1.0) / 2.0;
        let profile: Vec<f64> = (0..patch)
            .map(|i| {
                let d = (i as f64 - center) / sigma;
                (-0.5 * d * d).exp()
            })
            .collect();
        let data = profile
            .iter()
            .flat_map(|&a| profile.iter().map(move |&b| a * b))
            .collect();
        Ok(FeatherWeights { patch, sigma, data })
    }

    /// `sigma = patch / 4`.
    pub fn for_patch(patch: usize) -> Result<Self> {
        Self::gaussian(patch, patch as f64 / 4.0)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.patch + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Maps source tiles `[n, 3, p, p]` and attention-source tiles `[n, 1, p, p]`
/// to synthesized tiles `[n, 1, p, p]`.
pub trait TileGenerator {
    fn generate(&self, z: &Tensor<f32>, attention_source: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// The trained generator conditioned on the critic's spatial attention.
pub struct S2aTiles<'a> {
    pub generator: &'a Generator<f32>,
    pub critic: &'a Discriminator<f32>,
    pub variant: AttentionVariant,
}

impl TileGenerator for S2aTiles<'_> {
    fn generate(&self, z: &Tensor<f32>, attention_source: &Tensor<f32>) -> Result<Tensor<f32>> {
        training::predict(self.generator, self.critic, self.variant, z, attention_source)
    }
}

/// Where the attention map comes from at inference time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionSource {
    /// The coarse SWIR band, upsampled to the source grid.
    CoarseSwir,
    /// A full-resolution band of the source scene, used as is.
    Substitute(String),
}

impl fmt::Display for AttentionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionSource::CoarseSwir => write!(f, "coarse"),
            AttentionSource::Substitute(b) => write!(f, "band:{b}"),
        }
    }
}

impl FromStr for AttentionSource {
    type Err = Error;

    /// `coarse` or `band:<label>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("band:") {
            Some(b) if !b.is_empty() => Ok(AttentionSource::Substitute(b.to_string())),
            _ if s == "coarse" => Ok(AttentionSource::CoarseSwir),
            _ => Err(Error::Config(format!("attention source must be `coarse` or `band:<label>`, got {s:?}"))),
        }
    }
}

/// Attention-source plane on the grid of `source`.
pub fn attention_source_select(
    source: &MultiBandRaster,
    coarse: Option<&MultiBandRaster>,
    mode: &AttentionSource,
) -> Result<Vec<f32>> {
    match mode {
        AttentionSource::Substitute(band) => Ok(source.band(band)?.to_vec()),
        AttentionSource::CoarseSwir => {
            let coarse = coarse.ok_or_else(|| Error::UnknownBand(format!("coarse {TARGET_BAND}")))?;
            let f = coarse_factor(source.dims(), coarse.dims())?;
            upsample(coarse.band(TARGET_BAND)?, coarse.rows(), coarse.cols(), f)
        }
    }
}

fn tile(plane: &[f32], cols: usize, (r0, c0): (usize, usize), p: usize, out: &mut Vec<f32>) {
    for r in r0..r0 + p {
        out.extend_from_slice(&plane[r * cols + c0..r * cols + c0 + p]);
    }
}

/// Per-pixel sum of feather weights over all tiles of `plan`.
pub fn coverage(plan: &TilePlan, feather: &FeatherWeights) -> Result<Vec<f64>> {
    check_feather(plan, feather)?;
    let p = plan.patch;
    let mut den = vec![0.0f64; plan.rows * plan.cols];
    for &(r0, c0) in &plan.origins {
        for i in 0..p {
            let row = &mut den[(r0 + i) * plan.cols + c0..(r0 + i) * plan.cols + c0 + p];
            for (d, w) in row.iter_mut().zip(&feather.data[i * p..(i + 1) * p]) {
                *d += w;
            }
        }
    }
    Ok(den)
}

fn check_feather(plan: &TilePlan, feather: &FeatherWeights) -> Result<()> {
    if feather.patch != plan.patch {
        return Err(Error::ShapeMismatch(format!(
            "feather weights for patch {} used with tiles of {}",
            feather.patch, plan.patch
        )));
    }
    Ok(())
}

/// Runs `generator` over every tile and blends the outputs.
///
/// Each tile contributes `patch * w` to a numerator and `w` to a denominator;
/// the result is their ratio. Tiles are evaluated `batch` at a time and
/// accumulated in plan order, so the output does not depend on `batch`.
pub fn synthesize_scene(
    generator: &dyn TileGenerator,
    source: &MultiBandRaster,
    attention_source: &[f32],
    plan: &TilePlan,
    feather: &FeatherWeights,
    batch: usize,
) -> Result<MultiBandRaster> {
    let (rows, cols) = source.dims();
    if (rows, cols) != (plan.rows, plan.cols) || attention_source.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!(
            "scene {rows}x{cols}, attention source of {} pixels, plan for {}x{}",
            attention_source.len(),
            plan.rows,
            plan.cols
        )));
    }
    check_feather(plan, feather)?;
    let bands: Vec<&[f32]> = SOURCE_BANDS.iter().map(|b| source.band(b)).collect::<Result<_>>()?;
    let p = plan.patch;
    let mut num = vec![0.0f64; rows * cols];
    let den = coverage(plan, feather)?;
    for chunk in plan.origins.chunks(batch.max(1)) {
        let (mut z, mut a) = (Vec::new(), Vec::new());
        for &origin in chunk {
            for b in &bands {
                tile(b, cols, origin, p, &mut z);
            }
            tile(attention_source, cols, origin, p, &mut a);
        }
        let n = chunk.len();
        let out = generator.generate(&Tensor::from_vec([n, 3, p, p], z)?, &Tensor::from_vec([n, 1, p, p], a)?)?;
        if out.shape() != [n, 1, p, p] {
            return Err(Error::ShapeMismatch(format!("generator returned {:?} for {n} tiles", out.shape())));
        }
        for (t, &(r0, c0)) in chunk.iter().enumerate() {
            let patch = out.sample(t);
            for i in 0..p {
                let base = (r0 + i) * cols + c0;
                for j in 0..p {
                    num[base + j] += f64::from(patch[i * p + j]) * feather.get(i, j);
                }
            }
        }
    }
    if den.iter().any(|&d| d <= 0.0) {
        return Err(Error::UncoveredPixels);
    }
    let plane = num.iter().zip(&den).map(|(n, d)| (n / d) as f32).collect();
    MultiBandRaster::single(TARGET_BAND, rows, cols, plane)
}

/// Clamps every value to `[0, 1]`, as done when a synthesized raster is written out.
pub fn clamp_unit(raster: &MultiBandRaster) -> Result<MultiBandRaster> {
    let (rows, cols) = raster.dims();
    let data = raster.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    MultiBandRaster::new(raster.labels().to_vec(), rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{simulate_coarse, synth_scene};
    use proptest::prelude::*;

    /// Returns source channel `k` unchanged.
    struct Channel(usize);

    impl TileGenerator for Channel {
        fn generate(&self, z: &Tensor<f32>, _: &Tensor<f32>) -> Result<Tensor<f32>> {
            let [n, _, h, w] = z.shape();
            let mut out = Vec::with_capacity(n * h * w);
            for s in 0..n {
                out.extend_from_slice(&z.sample(s)[self.0 * h * w..(self.0 + 1) * h * w]);
            }
            Tensor::from_vec([n, 1, h, w], out)
        }
    }

    /// Each tile becomes the constant mean of its first source channel.
    struct TileMean;

    impl TileGenerator for TileMean {
        fn generate(&self, z: &Tensor<f32>, _: &Tensor<f32>) -> Result<Tensor<f32>> {
            let [n, _, h, w] = z.shape();
            let mut out = Vec::with_capacity(n * h * w);
            for s in 0..n {
                let m = z.sample(s)[..h * w].iter().sum::<f32>() / (h * w) as f32;
                out.extend(std::iter::repeat_n(m, h * w));
            }
            Tensor::from_vec([n, 1, h, w], out)
        }
    }

    fn scene(rows: usize, cols: usize) -> MultiBandRaster {
        synth_scene(3, rows.max(64), cols.max(64), 4)
            .unwrap()
            .source
            .window(0, 0, rows, cols)
            .unwrap()
    }

    #[test]
    fn plan_examples() {
        assert_eq!(plan_tiles(64, 64, 64, 16).unwrap().origins, vec![(0, 0)]);
        let rows = |p: &TilePlan| -> Vec<usize> {
            let set: std::collections::BTreeSet<usize> = p.origins.iter().map(|o| o.0).collect();
            set.into_iter().collect()
        };
        assert_eq!(rows(&plan_tiles(96, 64, 64, 16).unwrap()), vec![0, 16, 32]);
        assert_eq!(rows(&plan_tiles(100, 64, 64, 16).unwrap()), vec![0, 16, 32, 36]);
        assert!(matches!(plan_tiles(63, 64, 64, 16), Err(Error::CropLargerThanScene { .. })));
        assert!(matches!(plan_tiles(64, 64, 16, 17), Err(Error::Config(_))));
    }

    #[test]
    fn feather_shape() {
        let f = FeatherWeights::for_patch(64).unwrap();
        assert_eq!(f.sigma, 16.0);
        assert!(f.data().iter().all(|&w| w > 0.0));
        for i in 0..64 {
            for j in 0..64 {
                assert_eq!(f.get(i, j), f.get(63 - i, j));
                assert_eq!(f.get(i, j), f.get(i, 63 - j));
                assert!(f.get(i, j) <= f.get(31, 31));
            }
        }
        assert!(FeatherWeights::gaussian(8, 0.0).is_err());
    }

    #[test]
    fn single_tile_returns_generator_output_exactly() {
        let src = scene(64, 64);
        let plan = plan_tiles(64, 64, 64, 16).unwrap();
        let f = FeatherWeights::for_patch(64).unwrap();
        let out = synthesize_scene(&Channel(2), &src, src.band("NIR").unwrap(), &plan, &f, 4).unwrap();
        assert_eq!(out.plane(0), src.band("NIR").unwrap());
        assert_eq!(out.labels(), &["SWIR".to_string()]);
    }

    #[test]
    fn identity_stub_is_reconstructed_through_overlaps() {
        let src = scene(256, 256);
        let plan = plan_tiles(256, 256, 64, 16).unwrap();
        let f = FeatherWeights::for_patch(64).unwrap();
        let out = synthesize_scene(&Channel(1), &src, src.band("R").unwrap(), &plan, &f, 7).unwrap();
        let err = out
            .plane(0)
            .iter()
            .zip(src.band("R").unwrap())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn constant_tiles_blend_as_feather_weighted_means() {
        let src = scene(100, 80);
        let plan = plan_tiles(100, 80, 32, 12).unwrap();
        let f = FeatherWeights::gaussian(32, 5.0).unwrap();
        let out = synthesize_scene(&TileMean, &src, src.band("G").unwrap(), &plan, &f, 3).unwrap();
        let g = src.band("G").unwrap();
        let means: Vec<f64> = plan
            .origins
            .iter()
            .map(|&(r0, c0)| {
                let mut s = 0.0f32;
                for r in r0..r0 + 32 {
                    s += g[r * 80 + c0..r * 80 + c0 + 32].iter().sum::<f32>();
                }
                f64::from(s / 1024.0)
            })
            .collect();
        for r in 0..100 {
            for c in 0..80 {
                let (mut num, mut den) = (0.0, 0.0);
                for (t, &(r0, c0)) in plan.origins.iter().enumerate() {
                    if (r0..r0 + 32).contains(&r) && (c0..c0 + 32).contains(&c) {
                        let w = f.get(r - r0, c - c0);
                        num += w * means[t];
                        den += w;
                    }
                }
                let got = f64::from(out.plane(0)[r * 80 + c]);
                assert!((got - num / den).abs() < 1e-6, "({r},{c}) {got} vs {}", num / den);
            }
        }
    }

    #[test]
    fn batch_size_does_not_change_the_mosaic() {
        let src = scene(80, 96);
        let plan = plan_tiles(80, 96, 32, 16).unwrap();
        let f = FeatherWeights::for_patch(32).unwrap();
        let a = synthesize_scene(&TileMean, &src, src.band("G").unwrap(), &plan, &f, 1).unwrap();
        let b = synthesize_scene(&TileMean, &src, src.band("G").unwrap(), &plan, &f, 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let src = scene(64, 64);
        let plan = plan_tiles(64, 64, 32, 16).unwrap();
        let f = FeatherWeights::for_patch(32).unwrap();
        assert!(matches!(
            synthesize_scene(&Channel(0), &src, &[0.0; 10], &plan, &f, 1),
            Err(Error::ShapeMismatch(_))
        ));
        let other = FeatherWeights::for_patch(16).unwrap();
        assert!(synthesize_scene(&Channel(0), &src, src.band("G").unwrap(), &plan, &other, 1).is_err());
    }

    #[test]
    fn attention_source_modes() {
        let s = synth_scene(5, 64, 64, 4).unwrap();
        let nir = attention_source_select(&s.source, None, &AttentionSource::Substitute("NIR".into())).unwrap();
        assert_eq!(nir, s.source.band("NIR").unwrap());
        assert!(matches!(
            attention_source_select(&s.source, None, &AttentionSource::Substitute("B9".into())),
            Err(Error::UnknownBand(_))
        ));
        assert!(attention_source_select(&s.source, None, &AttentionSource::CoarseSwir).is_err());

        let same = attention_source_select(&s.source, Some(&s.target), &AttentionSource::CoarseSwir).unwrap();
        assert_eq!(same, s.target.plane(0));
        let coarse = s.coarse(4).unwrap();
        let up = attention_source_select(&s.source, Some(&coarse), &AttentionSource::CoarseSwir).unwrap();
        assert_eq!(up, simulate_coarse(s.target.plane(0), 64, 64, 4).unwrap());
    }

    #[test]
    fn attention_source_parses() {
        assert_eq!("coarse".parse::<AttentionSource>().unwrap(), AttentionSource::CoarseSwir);
        assert_eq!("band:NIR".parse::<AttentionSource>().unwrap(), AttentionSource::Substitute("NIR".into()));
        assert!("band:".parse::<AttentionSource>().is_err());
        assert!("nir".parse::<AttentionSource>().is_err());
        assert_eq!(AttentionSource::Substitute("R".into()).to_string(), "band:R");
    }

    #[test]
    fn clamp_keeps_labels() {
        let r = MultiBandRaster::single("SWIR", 1, 3, vec![-0.5, 0.5, 1.5]).unwrap();
        assert_eq!(clamp_unit(&r).unwrap().plane(0), &[0.0, 0.5, 1.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn plans_cover_every_pixel_within_bounds(rows in 8usize..80, cols in 8usize..80, patch in 1usize..9, stride in 1usize..12) {
            let stride = stride.min(patch);
            let plan = plan_tiles(rows, cols, patch, stride).unwrap();
            let f = FeatherWeights::for_patch(patch).unwrap();
            let den = coverage(&plan, &f).unwrap();
            prop_assert!(den.iter().all(|&d| d > 0.0));
            prop_assert!(plan.origins.iter().all(|&(r, c)| r + patch <= rows && c + patch <= cols));
        }

        #[test]
        fn normalized_weights_sum_to_one(rows in 16usize..70, cols in 16usize..70, stride in 1usize..=16) {
            let plan = plan_tiles(rows, cols, 16, stride).unwrap();
            let f = FeatherWeights::for_patch(16).unwrap();
            let den = coverage(&plan, &f).unwrap();
            let mut total = vec![0.0f64; rows * cols];
            for &(r0, c0) in &plan.origins {
                for i in 0..16 {
                    for j in 0..16 {
                        let k = (r0 + i) * cols + c0 + j;
                        total[k] += f.get(i, j) / den[k];
                    }
                }
            }
            prop_assert!(total.iter().all(|t| (t - 1.0).abs() < 1e-9));
        }
    }
}
