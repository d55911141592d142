//! Attention-variant and conditioning sweeps on a shared dataset, scored on a
//! held-out scene.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::datapipe::CropDataset;
use crate::error::Result;
use crate::evaluation::{evaluate_report, EvalOptions, Metrics};
use crate::model::{AttentionVariant, Conditioning};
use crate::raster::{export_png, MultiBandRaster, Stretch};
use crate::synthesis::{attention_source_select, clamp_unit, synthesize_scene, AttentionSource, FeatherWeights, S2aTiles, TilePlan};
use crate::training::{self, TrainConfig, TrainEvent, TrainState};

/// A scene with its true SWIR and the coarse SWIR the attention map is taken from.
#[derive(Clone, Debug)]
pub struct EvalScene {
    pub source: MultiBandRaster,
    pub target: MultiBandRaster,
    pub coarse: MultiBandRaster,
}

/// Tiled synthesis of `scene` with a trained state, clamped to `[0, 1]`.
pub fn synthesize_eval_scene(
    state: &TrainState,
    cfg: &TrainConfig,
    scene: &EvalScene,
    mode: &AttentionSource,
    patch: usize,
    stride: usize,
) -> Result<MultiBandRaster> {
    let (rows, cols) = scene.source.dims();
    let plan = crate::synthesis::plan_tiles(rows, cols, patch, stride)?;
    synthesize_with_plan(state, cfg, scene, mode, &plan)
}

fn synthesize_with_plan(
    state: &TrainState,
    cfg: &TrainConfig,
    scene: &EvalScene,
    mode: &AttentionSource,
    plan: &TilePlan,
) -> Result<MultiBandRaster> {
    let attention = attention_source_select(&scene.source, Some(&scene.coarse), mode)?;
    let tiles = S2aTiles {
        generator: &state.generator,
        critic: &state.critic,
        variant: cfg.attention,
    };
    let feather = FeatherWeights::for_patch(plan.patch)?;
    clamp_unit(&synthesize_scene(&tiles, &scene.source, &attention, plan, &feather, cfg.batch_size)?)
}

/// Whole-scene spatial attention map of the critic on the upsampled coarse band.
pub fn scene_attention(state: &TrainState, cfg: &TrainConfig, scene: &EvalScene) -> Result<MultiBandRaster> {
    let (rows, cols) = scene.source.dims();
    let up = attention_source_select(&scene.source, Some(&scene.coarse), &AttentionSource::CoarseSwir)?;
    let map = state.conditioning_map(cfg.attention, &Tensor::from_vec([1, 1, rows, cols], up)?)?;
    MultiBandRaster::single("A", rows, cols, map.value().data().to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub attention: AttentionVariant,
    pub conditioning: Conditioning,
    pub steps: u64,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub attention_png: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Concat and multiply runs of one attention variant, side by side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningComparison {
    pub attention: AttentionVariant,
    pub concat_sre_db: f64,
    pub multiply_sre_db: f64,
    pub concat_not_worse: bool,
}

impl AblationReport {
    pub fn row(&self, attention: AttentionVariant, conditioning: Conditioning) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.attention == attention && r.conditioning == conditioning)
    }

    pub fn conditioning_comparisons(&self) -> Vec<ConditioningComparison> {
        AttentionVariant::ALL
            .iter()
            .filter_map(|&v| {
                let c = self.row(v, Conditioning::Concat)?.metrics.sre_db;
                let m = self.row(v, Conditioning::Multiply)?.metrics.sre_db;
                Some(ConditioningComparison {
                    attention: v,
                    concat_sre_db: c,
                    multiply_sre_db: m,
                    concat_not_worse: c >= m,
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            rows: &'a [AblationRow],
            conditioning: Vec<ConditioningComparison>,
        }
        serde_json::to_string_pretty(&Out {
            rows: &self.rows,
            conditioning: self.conditioning_comparisons(),
        })
        .expect("report serializes")
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:<9} {:>6} {:>9} {:>8} {:>8} {:>9} {:>8}",
            "variant", "mode", "steps", "RMSE", "SSIM(%)", "SRE(dB)", "PSNR(dB)", "SAM(deg)"
        )?;
        for r in &self.rows {
            let m = &r.metrics;
            writeln!(
                f,
                "{:<8} {:<9} {:>6} {:>9.5} {:>8.2} {:>8.2} {:>9.2} {:>8.3}",
                r.attention.to_string(),
                r.conditioning.to_string(),
                r.steps,
                m.rmse,
                m.ssim_percent,
                m.sre_db,
                m.psnr_db,
                m.sam_deg
            )?;
        }
        for c in self.conditioning_comparisons() {
            writeln!(
                f,
                "{}: concat {:.2} dB vs multiply {:.2} dB ({})",
                c.attention,
                c.concat_sre_db,
                c.multiply_sre_db,
                if c.concat_not_worse { "concat not worse" } else { "multiply better" }
            )?;
        }
        Ok(())
    }
}

/// Trains one model per `(variant, conditioning)` pair from `base` and scores
/// each on `scene`. With `out_dir`, each run's attention map is written as
/// `attention_<variant>_<mode>.png`.
pub fn run_ablation(
    base: &TrainConfig,
    runs: &[(AttentionVariant, Conditioning)],
    train: &CropDataset,
    val: &CropDataset,
    scene: &EvalScene,
    out_dir: Option<&Path>,
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<AblationReport> {
    let (rows, cols) = scene.source.dims();
    let plan = TilePlan::default_for(rows, cols)?;
    let opts = EvalOptions::default();
    let mut report = AblationReport::default();
    for &(attention, conditioning) in runs {
        let cfg = TrainConfig {
            attention,
            conditioning,
            ..base.clone()
        };
        let state = training::train(&cfg, train, val, None, log)?.state;
        let pred = synthesize_with_plan(&state, &cfg, scene, &AttentionSource::CoarseSwir, &plan)?;
        let metrics = evaluate_report(&pred, &scene.target, Some(&scene.source), &opts)?.aggregate;
        let attention_png = match out_dir {
            Some(dir) => {
                let path = dir.join(format!("attention_{attention}_{conditioning}.png"));
                export_png(&scene_attention(&state, &cfg, scene)?, &["A"], Stretch::None, &path)?;
                Some(path.display().to_string())
            }
            None => None,
        };
        report.rows.push(AblationRow {
            attention,
            conditioning,
            steps: state.step,
            metrics,
            attention_png,
        });
    }
    Ok(report)
}

/// Every attention variant under both conditioning modes.
pub fn full_grid() -> Vec<(AttentionVariant, Conditioning)> {
    AttentionVariant::ALL
        .iter()
        .flat_map(|&v| [(v, Conditioning::Concat), (v, Conditioning::Multiply)])
        .collect()
}
