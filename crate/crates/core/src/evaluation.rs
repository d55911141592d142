//! Reference quality metrics, MNDWI water masks and report generation.
//!
//! All metrics accumulate in `f64` regardless of the storage type.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datapipe::window_origins;
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, MultiBandRaster};

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a} vs {b} values")));
    }
    Ok(())
}

/// Neumaier-compensated sum.
fn ksum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

pub fn mse(pred: &[f32], gt: &[f32]) -> Result<f64> {
    check_len("mse", pred.len(), gt.len())?;
    if gt.is_empty() {
        return Err(Error::ShapeMismatch("mse of empty planes".into()));
    }
    let se = ksum(pred.iter().zip(gt).map(|(&p, &g)| (p as f64 - g as f64).powi(2)));
    Ok(se / gt.len() as f64)
}

pub fn rmse(pred: &[f32], gt: &[f32]) -> Result<f64> {
    Ok(mse(pred, gt)?.sqrt())
}

/// `10 log10(peak^2 / mse)`; `+inf` when the planes are identical.
pub fn psnr(pred: &[f32], gt: &[f32], peak: f64) -> Result<f64> {
    let m = mse(pred, gt)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / m).log10() })
}

/// Signal-to-reconstruction error `10 log10(mean(gt)^2 / mse)`; `+inf` when exact.
pub fn sre(pred: &[f32], gt: &[f32]) -> Result<f64> {
    let m = mse(pred, gt)?;
    let mu = ksum(gt.iter().map(|&g| g as f64)) / gt.len() as f64;
    if mu == 0.0 {
        return Err(Error::ZeroMeanSignal);
    }
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (mu * mu / m).log10() })
}

pub const SSIM_WINDOW: usize = 8;

/// Mean SSIM over every fully contained 8x8 window (uniform weights, population
/// statistics), in percent. Planes smaller than the window use one window
/// covering the whole plane.
pub fn ssim(pred: &[f32], gt: &[f32], rows: usize, cols: usize, peak: f64) -> Result<f64> {
    check_len("ssim", pred.len(), gt.len())?;
    check_len("ssim plane", rows * cols, gt.len())?;
    if gt.is_empty() {
        return Err(Error::ShapeMismatch("ssim of empty planes".into()));
    }
    let (wh, ww) = (SSIM_WINDOW.min(rows), SSIM_WINDOW.min(cols));
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (wh * ww) as f64;
    let mut scores = Vec::with_capacity((rows - wh + 1) * (cols - ww + 1));
    for r0 in 0..=rows - wh {
        for c0 in 0..=cols - ww {
            let (mut sa, mut sb) = (0.0, 0.0);
            for r in r0..r0 + wh {
                for c in c0..c0 + ww {
                    sa += pred[r * cols + c] as f64;
                    sb += gt[r * cols + c] as f64;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for r in r0..r0 + wh {
                for c in c0..c0 + ww {
                    let da = pred[r * cols + c] as f64 - ma;
                    let db = gt[r * cols + c] as f64 - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            scores.push((2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
        }
    }
    Ok(100.0 * ksum(scores.iter().copied()) / scores.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamResult {
    pub degrees: f64,
    /// Pixels skipped because either vector had zero norm.
    pub skipped: usize,
}

/// Mean spectral angle between per-pixel band vectors, in degrees.
pub fn sam(pred: &[&[f32]], gt: &[&[f32]]) -> Result<SamResult> {
    check_len("sam bands", pred.len(), gt.len())?;
    let px = gt.first().map(|b| b.len()).ok_or(Error::AllPixelsDegenerate)?;
    for band in pred.iter().chain(gt) {
        check_len("sam band", band.len(), px)?;
    }
    // 2 atan2(|u - v|, |u + v|) on unit vectors stays accurate near 0 and 180 degrees.
    let mut angles = Vec::with_capacity(px);
    for i in 0..px {
        let na = pred.iter().map(|b| (b[i] as f64).powi(2)).sum::<f64>().sqrt();
        let nb = gt.iter().map(|b| (b[i] as f64).powi(2)).sum::<f64>().sqrt();
        if na > 0.0 && nb > 0.0 {
            let (mut diff, mut sum) = (0.0f64, 0.0f64);
            for (a, b) in pred.iter().zip(gt) {
                let (u, v) = (a[i] as f64 / na, b[i] as f64 / nb);
                diff += (u - v).powi(2);
                sum += (u + v).powi(2);
            }
            angles.push(2.0 * diff.sqrt().atan2(sum.sqrt()).to_degrees());
        }
    }
    if angles.is_empty() {
        return Err(Error::AllPixelsDegenerate);
    }
    Ok(SamResult {
        degrees: ksum(angles.iter().copied()) / angles.len() as f64,
        skipped: px - angles.len(),
    })
}

/// `(G - SWIR) / (G + SWIR)`, with `0/0` taken as 0.
pub fn mndwi(green: &[f32], swir: &[f32]) -> Result<Vec<f32>> {
    check_len("mndwi", green.len(), swir.len())?;
    Ok(green
        .iter()
        .zip(swir)
        .map(|(&g, &s)| {
            let (g, s) = (g as f64, s as f64);
            if g + s == 0.0 {
                0.0
            } else {
                ((g - s) / (g + s)) as f32
            }
        })
        .collect())
}

/// Pixels strictly above `t`.
pub fn threshold_mask(plane: &[f32], rows: usize, cols: usize, t: f64) -> Result<BinaryMask> {
    BinaryMask::new(rows, cols, plane.iter().map(|&v| v as f64 > t).collect())
}

/// Intersection over union; two empty masks count as identical.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
        return Err(Error::ShapeMismatch(format!(
            "iou {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

mod sentinel {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad metric value {t:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    #[serde(with = "sentinel")]
    pub psnr_db: f64,
    #[serde(with = "sentinel")]
    pub sre_db: f64,
    pub ssim_percent: f64,
    pub sam_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropMetrics {
    pub row: usize,
    pub col: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Radiometric scale the metrics were computed on.
    pub scale: String,
    pub peak: f64,
    #[serde(flatten)]
    pub aggregate: Metrics,
    pub sam_bands: Vec<String>,
    pub sam_skipped: usize,
    pub mndwi_threshold: f64,
    /// IoU between MNDWI masks from predicted and true SWIR, when a green band is available.
    pub mndwi_iou: Option<f64>,
    pub crops: Vec<CropMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub peak: f64,
    pub sam_bands: Vec<String>,
    pub mndwi_threshold: f64,
    pub crop: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            peak: 1.0,
            sam_bands: ["NIR", "R", "G"].map(String::from).to_vec(),
            mndwi_threshold: 0.0,
            crop: 64,
        }
    }
}

fn plane_metrics(pred: &[f32], gt: &[f32], rows: usize, cols: usize, peak: f64, pb: &[&[f32]], gb: &[&[f32]]) -> Result<(Metrics, usize)> {
    let mut pred_stack = vec![pred];
    let mut gt_stack = vec![gt];
    pred_stack.extend_from_slice(pb);
    gt_stack.extend_from_slice(gb);
    let s = sam(&pred_stack, &gt_stack)?;
    Ok((
        Metrics {
            rmse: rmse(pred, gt)?,
            psnr_db: psnr(pred, gt, peak)?,
            sre_db: sre(pred, gt)?,
            ssim_percent: ssim(pred, gt, rows, cols, peak)?,
            sam_deg: s.degrees,
        },
        s.skipped,
    ))
}

fn crop_of(plane: &[f32], cols: usize, r0: usize, c0: usize, size: (usize, usize)) -> Vec<f32> {
    (r0..r0 + size.0).flat_map(|r| plane[r * cols + c0..r * cols + c0 + size.1].iter().copied()).collect()
}

/// Full metric report for a synthesized SWIR band against the true one.
///
/// The SAM vectors stack SWIR with `opts.sam_bands`, taken from `shared`
/// (then from `gt`) and identical on both sides, so only SWIR differs. The
/// green band for MNDWI is looked up the same way; without one, `mndwi_iou` is
/// `None`.
pub fn evaluate_report(
    pred: &MultiBandRaster,
    gt: &MultiBandRaster,
    shared: Option<&MultiBandRaster>,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    let (rows, cols) = gt.dims();
    let band = |r: &MultiBandRaster| -> Result<Vec<f32>> {
        if r.bands() == 1 {
            Ok(r.plane(0).to_vec())
        } else {
            Ok(r.band(crate::datapipe::TARGET_BAND)?.to_vec())
        }
    };
    let (p, g) = (band(pred)?, band(gt)?);
    let lookup = |label: &str| -> Option<&[f32]> {
        shared
            .filter(|s| s.dims() == (rows, cols))
            .and_then(|s| s.band(label).ok())
            .or_else(|| gt.band(label).ok().filter(|_| gt.bands() > 1))
    };
    let mut sam_bands = Vec::new();
    let mut extra: Vec<&[f32]> = Vec::new();
    for label in &opts.sam_bands {
        if let Some(b) = lookup(label) {
            sam_bands.push(label.clone());
            extra.push(b);
        }
    }
    let (aggregate, sam_skipped) = plane_metrics(&p, &g, rows, cols, opts.peak, &extra, &extra)?;
    let mndwi_iou = match lookup("G") {
        Some(green) => {
            let mp = threshold_mask(&mndwi(green, &p)?, rows, cols, opts.mndwi_threshold)?;
            let mg = threshold_mask(&mndwi(green, &g)?, rows, cols, opts.mndwi_threshold)?;
            Some(iou(&mp, &mg)?)
        }
        None => None,
    };
    let mut crops = Vec::new();
    let size = (opts.crop.min(rows), opts.crop.min(cols));
    for &r0 in &window_origins(rows, size.0, size.0)? {
        for &c0 in &window_origins(cols, size.1, size.1)? {
            let pc = crop_of(&p, cols, r0, c0, size);
            let gc = crop_of(&g, cols, r0, c0, size);
            let ec: Vec<Vec<f32>> = extra.iter().map(|b| crop_of(b, cols, r0, c0, size)).collect();
            let er: Vec<&[f32]> = ec.iter().map(Vec::as_slice).collect();
            if let Ok((metrics, _)) = plane_metrics(&pc, &gc, size.0, size.1, opts.peak, &er, &er) {
                crops.push(CropMetrics { row: r0, col: c0, metrics });
            }
        }
    }
    Ok(MetricReport {
        scale: format!("reflectance, peak {}", opts.peak),
        peak: opts.peak,
        aggregate,
        sam_bands,
        sam_skipped,
        mndwi_threshold: opts.mndwi_threshold,
        mndwi_iou,
        crops,
    })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "inf".into()
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.aggregate;
        let iou = self.mndwi_iou.map_or("-".to_string(), cell);
        writeln!(f, "{:>10} {:>10} {:>10} {:>10} {:>10} {:>10}", "RMSE", "SSIM(%)", "SRE(dB)", "PSNR(dB)", "SAM(deg)", "IoU")?;
        writeln!(
            f,
            "{:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            cell(m.rmse),
            cell(m.ssim_percent),
            cell(m.sre_db),
            cell(m.psnr_db),
            cell(m.sam_deg),
            iou
        )?;
        write!(f, "scale: {}; {} crops", self.scale, self.crops.len())
    }
}
