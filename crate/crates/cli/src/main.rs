//! `odgi` — command-line front end for the grouped-instance detection
//! cascade: dataset generation, training, evaluation, threshold sweeps and
//! budget queries.
//!
//! Every command that writes to an output directory first records a
//! `manifest.json` with the resolved semantic parameters (never filesystem
//! paths or timestamps), so reruns with equal parameters produce
//! byte-identical output trees.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 numeric failure
//! during training or evaluation, 4 I/O or file-format error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use odgi_core::evalmetrics::{
    evaluate_pipeline, hyperparameter_sweep, standard_sweep_grid, EvalReport, SweepResult,
};
use odgi_core::pipeline::{scene_inputs, Ablation, Detector, PipelineConfig, StageConfig};
use odgi_core::synthdata::{
    generate, read_dataset, write_dataset, Clustering, OracleConfig, OracleDetector, OracleKind,
    SceneGenConfig,
};
use odgi_core::training::{train_epochs, train_two_stage, Checkpoint, TrainConfig};
use odgi_core::transition::TransitionConfig;
use odgi_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "odgi",
    version,
    about = "Grouped-instance detection cascade: data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (annotations and rendered images).
    Generate(GenerateArgs),
    /// Train the two-stage toy detector on a generated dataset.
    Train(TrainArgs),
    /// Run a cascade over a dataset and score it.
    Eval(EvalArgs),
    /// Grid-search transition thresholds and crop quotas.
    Sweep(SweepArgs),
    /// Print the worst-case box and pixel budgets of a cascade.
    Budget(BudgetArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory for the dataset.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mean number of objects per scene (Poisson).
    #[arg(long, default_value_t = 3.0)]
    mean_objects: f64,
    /// Mean object area as a fraction of the image.
    #[arg(long, default_value_t = 0.00113)]
    mean_area: f64,
    #[arg(long, default_value_t = 512)]
    image_size: u32,
    /// Number of cluster centers; 0 places objects uniformly.
    #[arg(long, default_value_t = 0)]
    clusters: usize,
    /// Per-axis spread of objects around their cluster center.
    #[arg(long, default_value_t = 0.02)]
    cluster_spread: f64,
    /// Minimum center distance between objects (0 = unconstrained).
    #[arg(long, default_value_t = 0.0)]
    min_separation: f64,
    /// Largest number of objects per cluster (0 = no cap).
    #[arg(long, default_value_t = 0)]
    max_cluster_size: usize,
    /// Minimum distance between cluster centers (0 = unconstrained).
    #[arg(long, default_value_t = 0.0)]
    cluster_min_distance: f64,
    /// Skip rendering; write annotations only.
    #[arg(long)]
    no_images: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Stage input resolutions, exactly two (coarse,fine).
    #[arg(long, default_value = "512,256", value_parser = parse_resolutions)]
    resolutions: std::vec::Vec<u32>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long = "lr", default_value_t = 0.2)]
    learning_rate: f64,
    /// Harmonic learning-rate decay: epoch E trains at lr/(1 + decay*E).
    #[arg(long = "lr-decay", default_value_t = 0.05)]
    lr_decay: f64,
    /// Multiplier on the learning rate for stage-2 updates.
    #[arg(long, default_value_t = 0.1)]
    stage2_lr_scale: f64,
    /// Scenes (or crops) per gradient step; the mean gradient is applied.
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Epoch at which stage 1 freezes and stage 2 starts fitting its crops.
    #[arg(long, default_value_t = 25)]
    stage2_start: usize,
    /// Most-confident crops collected per scene for stage 2.
    #[arg(long, default_value_t = 2)]
    crops_per_scene: usize,
    /// Bound on the stage-2 crop set extracted at the handoff.
    #[arg(long, default_value_t = 1024)]
    queue_capacity: usize,
    /// Minimum fraction of a box's area inside a crop for it to count.
    #[arg(long, default_value_t = 0.25)]
    crop_overlap: f64,
    /// Continue from an existing checkpoint up to --epochs total.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DetectorArgs {
    /// Evaluate a trained checkpoint.
    #[arg(long, conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Evaluate an oracle: `perfect`, `noisy:SIGMA,P_DROP,P_SPURIOUS`, or
    /// `degraded:AREA_PX`.
    #[arg(long, value_parser = parse_oracle)]
    oracle: Option<OracleKind>,
    #[arg(long, default_value_t = 0)]
    oracle_seed: u64,
    /// Stage input resolutions for oracle cascades (ignored with
    /// --checkpoint, which carries its own).
    #[arg(long, default_value = "512,256", value_parser = parse_resolutions)]
    resolutions: std::vec::Vec<u32>,
}

#[derive(Args)]
struct TransitionArgs {
    #[arg(long, default_value_t = 0.1)]
    tau_low: f64,
    #[arg(long, default_value_t = 0.9)]
    tau_high: f64,
    #[arg(long, default_value_t = 0.5)]
    tau_nms: f64,
    /// Crop quota per transition.
    #[arg(long, default_value_t = 3)]
    gamma: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
    #[command(flatten)]
    transition: TransitionArgs,
    /// Feature ablation: `full`, `no_groups`, `no_offsets`,
    /// `fixed_offsets:FACTOR`.
    #[arg(long, default_value = "full", value_parser = parse_ablation)]
    ablation: Ablation,
    /// Suppression threshold for pooled final detections, or `none`.
    #[arg(long, default_value = "0.5", value_parser = parse_final_nms)]
    final_nms: FinalNms,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
    /// Crop quotas to sweep, comma-separated.
    #[arg(long, default_value = "1,2,3,4", value_parser = parse_gammas)]
    gammas: std::vec::Vec<usize>,
    #[arg(long, default_value = "full", value_parser = parse_ablation)]
    ablation: Ablation,
    #[arg(long, default_value = "0.5", value_parser = parse_final_nms)]
    final_nms: FinalNms,
}

#[derive(Args)]
struct BudgetArgs {
    #[arg(long, value_parser = parse_resolutions)]
    resolutions: std::vec::Vec<u32>,
    /// Crop quota applied to every transition.
    #[arg(long, default_value_t = 3)]
    gamma: usize,
}

#[derive(Clone, Copy)]
struct FinalNms(Option<f64>);

fn parse_resolutions(s: &str) -> std::result::Result<Vec<u32>, String> {
    let list: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|e| format!("bad resolution {p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if list.is_empty() {
        return Err("at least one resolution required".into());
    }
    Ok(list)
}

fn parse_gammas(s: &str) -> std::result::Result<Vec<usize>, String> {
    let list: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad gamma {p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if list.is_empty() || list.iter().any(|&g| g == 0) {
        return Err("gammas must be positive".into());
    }
    Ok(list)
}

fn parse_oracle(s: &str) -> std::result::Result<OracleKind, String> {
    let (name, rest) = s.split_once(':').unwrap_or((s, ""));
    match name {
        "perfect" => Ok(OracleKind::Perfect),
        "noisy" => {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() != 3 {
                return Err("noisy oracle needs SIGMA,P_DROP,P_SPURIOUS".into());
            }
            let nums: Vec<f64> = parts
                .iter()
                .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad number {p:?}: {e}")))
                .collect::<std::result::Result<_, _>>()?;
            Ok(OracleKind::Noisy { sigma_jitter: nums[0], p_drop: nums[1], p_spurious: nums[2] })
        }
        "degraded" => {
            let px: f64 =
                rest.trim().parse().map_err(|e| format!("bad pixel threshold {rest:?}: {e}"))?;
            Ok(OracleKind::ResolutionDegraded { area_threshold_px: px })
        }
        other => Err(format!(
            "unknown oracle {other:?} (expected perfect, noisy:…, degraded:…)"
        )),
    }
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    let (name, rest) = s.split_once(':').unwrap_or((s, ""));
    match name {
        "full" => Ok(Ablation::Full),
        "no_groups" => Ok(Ablation::NoGroups),
        "no_offsets" => Ok(Ablation::NoOffsets),
        "fixed_offsets" => {
            let factor: f64 =
                rest.trim().parse().map_err(|e| format!("bad offset factor {rest:?}: {e}"))?;
            Ok(Ablation::FixedOffsets { factor })
        }
        other => Err(format!(
            "unknown ablation {other:?} (expected full, no_groups, no_offsets, fixed_offsets:F)"
        )),
    }
}

fn parse_final_nms(s: &str) -> std::result::Result<FinalNms, String> {
    if s == "none" {
        return Ok(FinalNms(None));
    }
    let tau: f64 = s.parse().map_err(|e| format!("bad threshold {s:?}: {e}"))?;
    Ok(FinalNms(Some(tau)))
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFiniteLoss { .. } => 3,
        Error::Io(_) | Error::Json(_) | Error::Format(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("ODGI_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: ODGI_THREADS must be a positive integer, got {threads:?}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Budget(args) => cmd_budget(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Serialize with a trailing newline so files are well-formed text.
fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    std::fs::write(path, out)?;
    Ok(())
}

/// Record what is about to run. Written before any heavy work so a crashed
/// or interrupted run still leaves its parameters behind. Contains no
/// filesystem paths and no timestamps: reruns must be byte-identical.
fn write_manifest(out_dir: &Path, command: &str, params: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let manifest = json!({
        "tool": "odgi",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "params": params,
    });
    write_json(&out_dir.join("manifest.json"), &manifest)
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let clustering = if args.clusters > 0 {
        Clustering::Clustered { clusters: args.clusters, spread: args.cluster_spread }
    } else {
        Clustering::None
    };
    let cfg = SceneGenConfig {
        seed: args.seed,
        mean_objects: args.mean_objects,
        mean_area_fraction: args.mean_area,
        clustering,
        image_size_px: args.image_size,
        min_separation: args.min_separation,
        max_cluster_size: args.max_cluster_size,
        cluster_min_distance: args.cluster_min_distance,
    };
    cfg.validate()?;
    write_manifest(
        &args.out,
        "generate",
        json!({ "scene_config": cfg, "count": args.count, "images": !args.no_images }),
    )?;
    if args.no_images {
        let scenes = odgi_core::synthdata::generate_scenes(&cfg, args.count)?;
        write_dataset(&args.out, &scenes, None)?;
    } else {
        let pairs = generate(&cfg, args.count)?;
        let (scenes, images): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        write_dataset(&args.out, &scenes, Some(&images))?;
    }
    println!("wrote {} scenes to {}", args.count, args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    if args.resolutions.len() != 2 {
        return Err(Error::Config(format!(
            "training expects exactly two resolutions, got {:?}",
            args.resolutions
        )));
    }
    let cfg = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        lr_decay: args.lr_decay,
        stage2_lr_scale: args.stage2_lr_scale,
        batch_size: args.batch_size,
        seed: args.seed,
        stage2_start_epoch: args.stage2_start,
        crops_per_scene: args.crops_per_scene,
        crop_queue_capacity: args.queue_capacity,
        crop_min_area_ratio: args.crop_overlap,
        ..Default::default()
    };
    cfg.validate()?;
    write_manifest(
        &args.out,
        "train",
        json!({
            "train_config": cfg,
            "resolutions": args.resolutions,
            "resumed": args.resume.is_some(),
        }),
    )?;
    let (scenes, images) = read_dataset(&args.data, true)?;

    let checkpoint = match &args.resume {
        None => {
            let run = train_two_stage(
                args.resolutions[0],
                args.resolutions[1],
                &scenes,
                &images,
                &cfg,
            )?;
            Checkpoint::new(cfg, args.epochs, run.model, run.history)
        }
        Some(path) => {
            let prev = Checkpoint::load(path)?;
            if prev.epochs_done >= args.epochs {
                return Err(Error::Config(format!(
                    "checkpoint already has {} epochs, nothing to do for --epochs {}",
                    prev.epochs_done, args.epochs
                )));
            }
            let mut model = prev.model;
            let mut history = prev.history;
            history.extend(train_epochs(
                &mut model,
                &scenes,
                &images,
                &cfg,
                prev.epochs_done..args.epochs,
            )?);
            Checkpoint::new(cfg, args.epochs, model, history)
        }
    };
    checkpoint.save(&args.out.join("checkpoint.json"))?;
    if let Some(last) = checkpoint.history.last() {
        println!(
            "epoch {}: stage1 loss {:.6}, stage2 loss {}",
            last.epoch,
            last.stage1_loss,
            last.stage2_loss.map_or("-".to_string(), |l| format!("{l:.6}")),
        );
    }
    println!("checkpoint written to {}", args.out.join("checkpoint.json").display());
    Ok(())
}

/// The detectors an eval or sweep runs, either trained or oracle.
enum Detectors {
    Trained(Box<Checkpoint>),
    Oracle(Vec<OracleDetector>),
}

impl Detectors {
    fn build(args: &DetectorArgs) -> Result<(Self, Vec<u32>, bool, serde_json::Value)> {
        match (&args.checkpoint, &args.oracle) {
            (Some(path), None) => {
                let ckpt = Checkpoint::load(path)?;
                let resolutions =
                    vec![ckpt.model.stage1.resolution_px, ckpt.model.stage2.resolution_px];
                let desc = json!({
                    "detector": "checkpoint",
                    "epochs_done": ckpt.epochs_done,
                    "resolutions": resolutions,
                });
                Ok((Detectors::Trained(Box::new(ckpt)), resolutions, true, desc))
            }
            (None, Some(kind)) => {
                let cfg = OracleConfig::new(*kind, args.oracle_seed);
                let dets = OracleDetector::stages(cfg, &args.resolutions);
                let desc = json!({
                    "detector": "oracle",
                    "oracle": cfg,
                    "resolutions": args.resolutions,
                });
                Ok((Detectors::Oracle(dets), args.resolutions.clone(), false, desc))
            }
            _ => Err(Error::Config(
                "exactly one of --checkpoint or --oracle is required".into(),
            )),
        }
    }

    fn as_dyn(&self) -> Vec<&(dyn Detector + Sync)> {
        match self {
            Detectors::Trained(ckpt) => {
                vec![&ckpt.model.stage1 as &(dyn Detector + Sync), &ckpt.model.stage2]
            }
            Detectors::Oracle(dets) => {
                dets.iter().map(|d| d as &(dyn Detector + Sync)).collect()
            }
        }
    }
}

fn cascade_config(
    resolutions: &[u32],
    transition: Option<TransitionConfig>,
    ablation: Ablation,
    final_nms: FinalNms,
) -> Result<PipelineConfig> {
    let stages = if resolutions.len() == 1 {
        vec![StageConfig { resolution_px: resolutions[0], transition: None }]
    } else {
        let t = transition.ok_or_else(|| {
            Error::Config("multi-stage cascades need transition parameters".into())
        })?;
        let last = resolutions.len() - 1;
        resolutions
            .iter()
            .enumerate()
            .map(|(i, &r)| StageConfig {
                resolution_px: r,
                transition: (i < last).then_some(t),
            })
            .collect()
    };
    let cfg = PipelineConfig { stages, ablation, final_nms: final_nms.0 };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct DetectionRecord<'a> {
    image_id: &'a str,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    confidence: f64,
    stage: usize,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (detectors, resolutions, wants_pixels, detector_desc) =
        Detectors::build(&args.detector)?;
    let t = TransitionConfig::new(
        args.transition.tau_low,
        args.transition.tau_high,
        args.transition.tau_nms,
        args.transition.gamma,
    )?;
    let cfg = cascade_config(
        &resolutions,
        (resolutions.len() > 1).then_some(t),
        args.ablation,
        args.final_nms,
    )?;
    write_manifest(
        &args.out,
        "eval",
        json!({ "detector": detector_desc, "pipeline": cfg }),
    )?;

    let (scenes, images) = read_dataset(&args.data, wants_pixels)?;
    let inputs = scene_inputs(&scenes, wants_pixels.then_some(images.as_slice()));
    let eval = evaluate_pipeline(&cfg, &detectors.as_dyn(), &inputs)?;

    write_json(&args.out.join("report.json"), &eval.report)?;
    let mut det_file =
        std::io::BufWriter::new(std::fs::File::create(args.out.join("detections.jsonl"))?);
    for (run, scene) in eval.runs.iter().zip(&scenes) {
        for d in &run.detections {
            let record = DetectionRecord {
                image_id: &scene.image_id,
                cx: d.bbox.cx,
                cy: d.bbox.cy,
                w: d.bbox.w,
                h: d.bbox.h,
                confidence: d.confidence,
                stage: d.stage,
            };
            serde_json::to_writer(&mut det_file, &record)?;
            det_file.write_all(b"\n")?;
        }
    }
    det_file.flush()?;
    print_report(&eval.report);
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!(
        "mAP@0.50 {:.4}  mAP@0.75 {:.4}  ({} detections over {} images, {} truths)",
        report.map50, report.map75, report.total_detections, report.images, report.total_truth
    );
    println!(
        "boxes/image mean {:.1} max {} (budget {}); pixels/image mean {:.0} max {} (budget {})",
        report.mean_boxes_evaluated,
        report.max_boxes_evaluated,
        report.box_budget,
        report.mean_pixels_processed,
        report.max_pixels_processed,
        report.pixel_budget
    );
}

fn sweep_csv(result: &SweepResult) -> String {
    let mut csv = String::from("tau_low,tau_high,tau_nms,gamma,map50,map75,box_budget,pixel_budget\n");
    for p in &result.points {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            p.transition.tau_low,
            p.transition.tau_high,
            p.transition.tau_nms,
            p.transition.gamma,
            p.map50,
            p.map75,
            p.box_budget,
            p.pixel_budget
        ));
    }
    csv
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let (detectors, resolutions, wants_pixels, detector_desc) =
        Detectors::build(&args.detector)?;
    if resolutions.len() < 2 {
        return Err(Error::Config("a sweep needs a cascade with at least two stages".into()));
    }
    let base = cascade_config(
        &resolutions,
        Some(TransitionConfig::training()),
        args.ablation,
        args.final_nms,
    )?;
    let candidates = standard_sweep_grid(&args.gammas);
    write_manifest(
        &args.out,
        "sweep",
        json!({
            "detector": detector_desc,
            "ablation": args.ablation,
            "gammas": args.gammas,
            "candidates": candidates.len(),
        }),
    )?;

    let (scenes, images) = read_dataset(&args.data, wants_pixels)?;
    let inputs = scene_inputs(&scenes, wants_pixels.then_some(images.as_slice()));
    let result = hyperparameter_sweep(&base, &detectors.as_dyn(), &inputs, &candidates)?;

    std::fs::write(args.out.join("sweep.csv"), sweep_csv(&result))?;
    let best = result.best_point();
    write_json(&args.out.join("best.json"), best)?;
    println!(
        "swept {} configurations; best mAP@0.50 {:.4} at tau_low {} tau_high {} tau_nms {} gamma {}",
        result.points.len(),
        best.map50,
        best.transition.tau_low,
        best.transition.tau_high,
        best.transition.tau_nms,
        best.transition.gamma
    );
    Ok(())
}

fn cmd_budget(args: BudgetArgs) -> Result<()> {
    let t = TransitionConfig { tau_low: 0.0, tau_high: 1.0, tau_nms: 1.0, gamma: args.gamma };
    let cfg = cascade_config(
        &args.resolutions,
        (args.resolutions.len() > 1).then_some(t),
        Ablation::Full,
        FinalNms(Some(0.5)),
    )?;
    let grids = cfg.grids()?;
    let report = json!({
        "resolutions": args.resolutions,
        "gamma": args.gamma,
        "grids": grids.iter().map(|g| format!("{}x{}", g.rows, g.cols)).collect::<Vec<_>>(),
        "box_budget": cfg.box_budget()?,
        "pixel_budget": cfg.pixel_budget()?,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
