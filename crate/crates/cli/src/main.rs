mod layout;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use s2a_core::ablation::{run_ablation, EvalScene};
use s2a_core::config::RunConfig;
use s2a_core::datapipe::split_dataset;
use s2a_core::evaluation::{evaluate_report, iou, mndwi, threshold_mask, EvalOptions};
use s2a_core::model::{AttentionVariant, Conditioning};
use s2a_core::raster::{export_png, read_mbr, write_mbr, Stretch};
use s2a_core::synthesis::{
    attention_source_select, clamp_unit, plan_tiles, synthesize_scene, AttentionSource, FeatherWeights, S2aTiles,
};
use s2a_core::training::{load_checkpoint, load_checkpoint_for, resume, train, TrainEvent};
use s2a_core::{BinaryMask, Error, MultiBandRaster};

use layout::{Datagen, SceneFiles};

/// Multi-spectral SWIR band synthesis with a spatio-spectral attention WGAN.
#[derive(Parser)]
#[command(name = "s2a", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "S2A_THREADS")]
    threads: Option<usize>,
    /// JSON output instead of human-readable tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set loss.lambda_gp=10` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes and a crop manifest.
    Datagen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scenes: Option<usize>,
        /// Scene side length in pixels.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain and adversarially train on a generated dataset.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint and log directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Synthesize the SWIR band of a whole scene.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Raster with G, R and NIR.
        #[arg(long)]
        source: PathBuf,
        /// Coarse SWIR raster, required with `--attention-from coarse`.
        #[arg(long)]
        coarse: Option<PathBuf>,
        /// `coarse` or `band:<label>` (e.g. `band:NIR`).
        #[arg(long, default_value = "coarse")]
        attention_from: String,
        #[arg(long, default_value_t = 64)]
        patch: usize,
        #[arg(long, default_value_t = 16)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write a SWIR/NIR/R false-color PNG.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Quality metrics of a synthesized SWIR band against the true one.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Raster with the bands shared by both sides (G, R, NIR).
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        peak: f64,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
        /// Write the JSON report here as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// MNDWI index map, water mask and IoU.
    Mndwi {
        /// Raster with band G.
        #[arg(long)]
        source: PathBuf,
        /// Raster whose SWIR band is used.
        #[arg(long)]
        swir: PathBuf,
        /// Reference SWIR raster; its mask is compared with ours.
        #[arg(long, conflicts_with = "mask")]
        reference: Option<PathBuf>,
        /// Reference mask raster (nonzero is water).
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
        /// Output directory for mndwi.mbr, mask.mbr and mask.png.
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention-variant and conditioning sweep.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Scene directory to score on (default: the first scene of `--data`).
        #[arg(long)]
        eval_scene: Option<PathBuf>,
        /// Adversarial steps per run.
        #[arg(long, default_value_t = 300)]
        steps: u64,
        #[arg(long, value_delimiter = ',', default_value = "v1,v2,v3")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "concat,multiply")]
        modes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render bands of a raster to PNG.
    Export {
        #[arg(long)]
        input: PathBuf,
        /// One label, or three for RGB.
        #[arg(long, value_delimiter = ',', default_value = "SWIR")]
        bands: Vec<String>,
        /// `none` or `percentile`.
        #[arg(long, default_value = "percentile")]
        stretch: String,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<(), Failure>;

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn parse_arg<T: std::str::FromStr<Err = Error>>(value: &str) -> Result<T, Failure> {
    value.parse().map_err(usage)
}

fn run_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            RunConfig::from_text(&text).map_err(usage)?
        }
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.overrides).map_err(usage)?;
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|source| {
        Failure::Runtime(Error::Io {
            path: dir.to_path_buf(),
            source,
        })
    })
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|source| {
        Failure::Runtime(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

/// Prints events as JSON lines or short human lines, and appends every
/// event to `train.jsonl`.
struct EventSink {
    json: bool,
    log: fs::File,
}

impl EventSink {
    fn open(dir: &Path, json: bool, append: bool) -> Result<Self, Failure> {
        let path = dir.join("train.jsonl");
        let log = fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .map_err(|source| Failure::Runtime(Error::Io { path, source }))?;
        Ok(EventSink { json, log })
    }

    fn emit(&mut self, e: &TrainEvent) {
        let line = e.to_json();
        let _ = writeln!(self.log, "{line}");
        if self.json {
            println!("{line}");
            return;
        }
        match e {
            TrainEvent::Pretrain { epoch, train_mse, val_mse } => match train_mse {
                Some(t) => println!("pretrain epoch {epoch}: train mse {t:.6}, val mse {val_mse:.6}"),
                None => println!("pretrain start: val mse {val_mse:.6}"),
            },
            TrainEvent::Step(r) if r.step % 50 == 0 => println!(
                "step {:>6}: wgap {:.4} gp {:.4} |grad| {:.3} sa {:.4} da {:.4} pix {:.5}",
                r.step,
                r.wasserstein_gap,
                r.gradient_penalty,
                r.critic_grad_norm,
                r.spatial_attention,
                r.domain_adaptation,
                r.pixel
            ),
            TrainEvent::Step(_) => {}
            TrainEvent::Validation { step, val_mse, val_sre } => {
                println!("validation at {step}: mse {val_mse:.6}, sre {val_sre:.2} dB")
            }
            TrainEvent::Checkpoint { path, .. } => println!("wrote {path}"),
        }
    }
}

fn datagen(cli: &Cli, config: &ConfigArgs, seed: Option<u64>, scenes: Option<usize>, size: Option<usize>, out: &Path) -> Outcome {
    let mut cfg = run_config(config)?;
    let d = &mut cfg.data;
    d.seed = seed.unwrap_or(d.seed);
    d.scenes = scenes.unwrap_or(d.scenes);
    d.size = size.unwrap_or(d.size);
    cfg.validate().map_err(usage)?;
    let spec = Datagen {
        seed: cfg.data.seed,
        scenes: cfg.data.scenes,
        size: cfg.data.size,
        crop: cfg.data.crop_options(),
    };
    let entries = layout::generate(&spec, out)?;
    if cli.json {
        println!(
            "{}",
            serde_json::json!({"scenes": spec.scenes, "size": spec.size, "crops": entries.len(), "out": out.display().to_string()})
        );
    } else {
        println!(
            "{} scenes of {}x{} and {} crop windows in {}",
            spec.scenes,
            spec.size,
            spec.size,
            entries.len(),
            out.display()
        );
    }
    Ok(())
}

fn train_cmd(cli: &Cli, config: &ConfigArgs, data: &Path, out: &Path, from: Option<&Path>) -> Outcome {
    let cfg = run_config(config)?;
    let all = layout::load_dataset(data, cfg.data.crop_options())?;
    let (train_set, val_set, _) = split_dataset(&all, cfg.data.split, cfg.data.seed)?;
    create_dir(out)?;
    write_file(&out.join("config.txt"), &cfg.to_text())?;
    let mut sink = EventSink::open(out, cli.json, from.is_some())?;
    let mut log = |e: &TrainEvent| sink.emit(e);
    let outcome = match from {
        Some(path) => {
            let state = load_checkpoint_for(path, &cfg.train)?;
            resume(state, &cfg.train, &train_set, &val_set, Some(out), &mut log)?
        }
        None => train(&cfg.train, &train_set, &val_set, Some(out), &mut log)?,
    };
    if !cli.json {
        let best = outcome.state.best.map_or("-".to_string(), |b| format!("{:.2} dB at step {}", b.val_sre, b.step));
        println!(
            "trained on {} crops ({} validation); best validation SRE {best}",
            train_set.len(),
            val_set.len()
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn synthesize(
    cli: &Cli,
    checkpoint: &Path,
    source: &Path,
    coarse: Option<&Path>,
    attention_from: &str,
    patch: usize,
    stride: usize,
    out: &Path,
    png: Option<&Path>,
) -> Outcome {
    let mode: AttentionSource = parse_arg(attention_from)?;
    let (cfg, state) = load_checkpoint(checkpoint)?;
    let source = read_mbr(source)?;
    let coarse = coarse.map(read_mbr).transpose()?;
    let (rows, cols) = source.dims();
    let plan = plan_tiles(rows, cols, patch, stride)?;
    let attention = attention_source_select(&source, coarse.as_ref(), &mode)?;
    let tiles = S2aTiles {
        generator: &state.generator,
        critic: &state.critic,
        variant: cfg.attention,
    };
    let feather = FeatherWeights::for_patch(patch)?;
    let pred = clamp_unit(&synthesize_scene(&tiles, &source, &attention, &plan, &feather, cfg.batch_size)?)?;
    write_mbr(&pred, out)?;
    if let Some(png) = png {
        let composite = MultiBandRaster::from_planes(
            vec![
                ("SWIR", pred.plane(0).to_vec()),
                ("NIR", source.band("NIR")?.to_vec()),
                ("R", source.band("R")?.to_vec()),
            ],
            rows,
            cols,
        )?;
        export_png(&composite, &["SWIR", "NIR", "R"], Stretch::DEFAULT_PERCENTILE, png)?;
    }
    if cli.json {
        println!(
            "{}",
            serde_json::json!({"out": out.display().to_string(), "tiles": plan.origins.len(), "attention_from": mode.to_string()})
        );
    } else {
        println!(
            "synthesized {rows}x{cols} SWIR from {} tiles (attention from {mode}) into {}",
            plan.origins.len(),
            out.display()
        );
    }
    Ok(())
}

fn evaluate(cli: &Cli, pred: &Path, gt: &Path, source: Option<&Path>, peak: f64, threshold: f64, out: Option<&Path>) -> Outcome {
    let pred = clamp_unit(&read_mbr(pred)?)?;
    let gt = read_mbr(gt)?;
    let source = source.map(read_mbr).transpose()?;
    let opts = EvalOptions {
        peak,
        mndwi_threshold: threshold,
        ..EvalOptions::default()
    };
    let report = evaluate_report(&pred, &gt, source.as_ref(), &opts)?;
    if let Some(out) = out {
        write_file(out, &report.to_json())?;
    }
    if cli.json {
        println!("{}", report.to_json());
    } else {
        println!("{report}");
    }
    Ok(())
}

fn mndwi_cmd(cli: &Cli, source: &Path, swir: &Path, reference: Option<&Path>, mask: Option<&Path>, t: f64, out: &Path) -> Outcome {
    let source = read_mbr(source)?;
    let swir_of = |r: &MultiBandRaster| -> Result<Vec<f32>, Error> {
        if r.bands() == 1 {
            Ok(r.plane(0).to_vec())
        } else {
            Ok(r.band("SWIR")?.to_vec())
        }
    };
    let (rows, cols) = source.dims();
    let green = source.band("G")?;
    let index = mndwi(green, &swir_of(&read_mbr(swir)?)?)?;
    let ours = threshold_mask(&index, rows, cols, t)?;
    let truth: Option<BinaryMask> = match (reference, mask) {
        (Some(r), _) => Some(threshold_mask(&mndwi(green, &swir_of(&read_mbr(r)?)?)?, rows, cols, t)?),
        (None, Some(m)) => Some(BinaryMask::from_raster(&read_mbr(m)?)),
        (None, None) => None,
    };
    let score = truth.as_ref().map(|m| iou(&ours, m)).transpose()?;
    create_dir(out)?;
    write_mbr(&MultiBandRaster::single("MNDWI", rows, cols, index)?, out.join("mndwi.mbr"))?;
    let mask_raster = ours.to_raster("WATER");
    write_mbr(&mask_raster, out.join("mask.mbr"))?;
    export_png(&mask_raster, &["WATER"], Stretch::None, out.join("mask.png"))?;
    if cli.json {
        println!(
            "{}",
            serde_json::json!({"water_pixels": ours.count(), "pixels": rows * cols, "threshold": t, "iou": score})
        );
    } else {
        println!("water pixels: {} of {}", ours.count(), rows * cols);
        if let Some(s) = score {
            println!("IoU: {s:.4}");
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    cli: &Cli,
    config: &ConfigArgs,
    data: &Path,
    eval_scene: Option<&Path>,
    steps: u64,
    variants: &[String],
    modes: &[String],
    out: &Path,
) -> Outcome {
    let mut cfg = run_config(config)?;
    cfg.train.adversarial_steps = steps;
    cfg.validate().map_err(usage)?;
    let variants: Vec<AttentionVariant> = variants.iter().map(|v| parse_arg(v)).collect::<Result<_, _>>()?;
    let modes: Vec<Conditioning> = modes.iter().map(|m| parse_arg(m)).collect::<Result<_, _>>()?;
    let runs: Vec<_> = variants.iter().flat_map(|&v| modes.iter().map(move |&m| (v, m))).collect();
    let all = layout::load_dataset(data, cfg.data.crop_options())?;
    let (train_set, val_set, _) = split_dataset(&all, cfg.data.split, cfg.data.seed)?;
    let scene_dir = eval_scene.map_or_else(|| data.join("scene_000"), Path::to_path_buf);
    let scene: EvalScene = SceneFiles::new(scene_dir).load_eval()?;
    create_dir(out)?;
    let json = cli.json;
    let mut log = |e: &TrainEvent| {
        if json {
            println!("{}", e.to_json());
        }
    };
    let report = run_ablation(&cfg.train, &runs, &train_set, &val_set, &scene, Some(out), &mut log)?;
    write_file(&out.join("ablation.json"), &report.to_json())?;
    write_file(&out.join("ablation.txt"), &report.to_string())?;
    if json {
        println!("{}", serde_json::to_string(&report).expect("report serializes"));
    } else {
        print!("{report}");
    }
    Ok(())
}

fn export(cli: &Cli, input: &Path, bands: &[String], stretch: &str, out: &Path) -> Outcome {
    let stretch = match stretch {
        "none" => Stretch::None,
        "percentile" => Stretch::DEFAULT_PERCENTILE,
        other => return Err(Failure::Usage(format!("stretch must be `none` or `percentile`, got {other:?}"))),
    };
    let raster = read_mbr(input)?;
    let labels: Vec<&str> = bands.iter().map(String::as_str).collect();
    export_png(&raster, &labels, stretch, out)?;
    if cli.json {
        println!("{}", serde_json::json!({"out": out.display().to_string(), "bands": labels}));
    } else {
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Datagen {
            config,
            seed,
            scenes,
            size,
            out,
        } => datagen(cli, config, *seed, *scenes, *size, out),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => train_cmd(cli, config, data, out, resume.as_deref()),
        Command::Synthesize {
            checkpoint,
            source,
            coarse,
            attention_from,
            patch,
            stride,
            out,
            png,
        } => synthesize(cli, checkpoint, source, coarse.as_deref(), attention_from, *patch, *stride, out, png.as_deref()),
        Command::Evaluate {
            pred,
            gt,
            source,
            peak,
            threshold,
            out,
        } => evaluate(cli, pred, gt, source.as_deref(), *peak, *threshold, out.as_deref()),
        Command::Mndwi {
            source,
            swir,
            reference,
            mask,
            threshold,
            out,
        } => mndwi_cmd(cli, source, swir, reference.as_deref(), mask.as_deref(), *threshold, out),
        Command::Ablate {
            config,
            data,
            eval_scene,
            steps,
            variants,
            modes,
            out,
        } => ablate(cli, config, data, eval_scene.as_deref(), *steps, variants, modes, out),
        Command::Export {
            input,
            bands,
            stretch,
            out,
        } => export(cli, input, bands, stretch, out),
    }
}

fn synopsis() -> String {
    use clap::CommandFactory;
    Cli::command().render_usage().to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive\n{}", synopsis());
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n{}", synopsis());
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
