//! Evaluation: average precision, dataset statistics, crop-quota
//! recommendation, and threshold sweeps.
//!
//! Average precision is single-class, all-point interpolated: detections are
//! pooled across images, sorted by confidence, matched greedily (best
//! still-unmatched ground-truth box at or above the IoU threshold), and the
//! area under the monotone precision envelope is accumulated over recall
//! increments. An empty dataset with no detections scores 1; detections on
//! an empty dataset score 0.

use rayon::prelude::*;
use serde::Serialize;

use crate::boxgeom::{resolution_to_grid, iou, BBox, GridSpec};
use crate::grouping::{self, GroundTruthScene};
use crate::pipeline::{self, Detector, PipelineConfig, PipelineRun, RegionSample, SceneInput};
use crate::transition::{extract_crops, ScoredDetection, TransitionConfig};
use crate::{Error, Result};

/// Detections and ground truth for one image.
#[derive(Debug, Clone, Copy)]
pub struct EvalSample<'a> {
    pub detections: &'a [ScoredDetection],
    pub truth: &'a [BBox],
}

/// Greedy one-to-one matching in confidence order. Returns one flag per
/// detection (in the order given): true when it claimed a ground-truth box
/// with IoU at or above the threshold.
pub fn match_detections(
    detections: &[ScoredDetection],
    truth: &[BBox],
    iou_threshold: f64,
) -> Vec<bool> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b].confidence.total_cmp(&detections[a].confidence).then(a.cmp(&b))
    });
    let mut taken = vec![false; truth.len()];
    let mut matched = vec![false; detections.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in truth.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&detections[i].bbox, gt);
            if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            matched[i] = true;
        }
    }
    matched
}

/// One step of the precision/recall curve, recorded per pooled detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PRPoint {
    pub recall: f64,
    pub precision: f64,
}

/// The pooled precision/recall curve and its all-point interpolated area.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PRCurve {
    pub points: Vec<PRPoint>,
    pub ap: f64,
}

pub fn precision_recall(samples: &[EvalSample<'_>], iou_threshold: f64) -> PRCurve {
    let total_truth: usize = samples.iter().map(|s| s.truth.len()).sum();
    // (confidence, matched) pooled across images.
    let mut pooled: Vec<(f64, bool)> = Vec::new();
    for s in samples {
        let matched = match_detections(s.detections, s.truth, iou_threshold);
        pooled.extend(s.detections.iter().zip(matched).map(|(d, m)| (d.confidence, m)));
    }
    if total_truth == 0 {
        let ap = if pooled.is_empty() { 1.0 } else { 0.0 };
        return PRCurve { points: Vec::new(), ap };
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = Vec::with_capacity(pooled.len());
    let mut tp = 0usize;
    for (rank, (_, matched)) in pooled.iter().enumerate() {
        tp += *matched as usize;
        points.push(PRPoint {
            recall: tp as f64 / total_truth as f64,
            precision: tp as f64 / (rank + 1) as f64,
        });
    }

    // Area under the monotone envelope: walk backwards keeping the running
    // precision maximum, adding it over each recall increment.
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    for i in (0..points.len()).rev() {
        envelope = envelope.max(points[i].precision);
        let prev_recall = if i == 0 { 0.0 } else { points[i - 1].recall };
        ap += (points[i].recall - prev_recall) * envelope;
    }
    PRCurve { points, ap }
}

pub fn average_precision(samples: &[EvalSample<'_>], iou_threshold: f64) -> f64 {
    precision_recall(samples, iou_threshold).ap
}

// ---------------------------------------------------------------------------
// Dataset statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DatasetStats {
    pub scenes: usize,
    pub total_boxes: usize,
    pub mean_boxes_per_scene: f64,
    /// Fraction of grid cells no box intersects.
    pub empty_cell_fraction: f64,
    /// Fraction of occupied cells holding two or more boxes.
    pub group_cell_fraction: f64,
}

pub fn dataset_stats(scenes: &[GroundTruthScene], grid: GridSpec) -> DatasetStats {
    let mut total_boxes = 0usize;
    let mut occupied = 0usize;
    let mut groups = 0usize;
    for scene in scenes {
        total_boxes += scene.boxes.len();
        let assignment = grouping::assign(scene, grid);
        for cell in grid.cells() {
            let n = assignment.assigned(cell).len();
            occupied += (n > 0) as usize;
            groups += (n > 1) as usize;
        }
    }
    let total_cells = scenes.len() * grid.cell_count();
    DatasetStats {
        scenes: scenes.len(),
        total_boxes,
        mean_boxes_per_scene: if scenes.is_empty() {
            0.0
        } else {
            total_boxes as f64 / scenes.len() as f64
        },
        empty_cell_fraction: if total_cells == 0 {
            1.0
        } else {
            1.0 - occupied as f64 / total_cells as f64
        },
        group_cell_fraction: if occupied == 0 { 0.0 } else { groups as f64 / occupied as f64 },
    }
}

// ---------------------------------------------------------------------------
// Crop quota recommendation
// ---------------------------------------------------------------------------

/// The smallest crop quota that, on average, keeps every useful crop: the
/// mean per-image count of relevant crops, rounded up (at least 1).
pub fn recommend_gamma(relevant_crop_counts: &[usize]) -> usize {
    if relevant_crop_counts.is_empty() {
        return 1;
    }
    let mean = relevant_crop_counts.iter().sum::<usize>() as f64
        / relevant_crop_counts.len() as f64;
    (mean.ceil() as usize).max(1)
}

/// Count, per image, the crops a stage would hand on under the permissive
/// training transition that actually contain ground truth. Used to size the
/// crop quota before committing to a cascade configuration.
pub fn relevant_crop_counts<D: Detector + Sync>(
    detector: &D,
    resolution_px: u32,
    inputs: &[SceneInput<'_>],
) -> Result<Vec<usize>> {
    let grid = resolution_to_grid(resolution_px)?;
    let permissive = TransitionConfig::training();
    inputs
        .par_iter()
        .map(|input| {
            let scene = input
                .scene
                .ok_or_else(|| Error::Config("crop counting requires ground truth".into()))?;
            let region = BBox::new(0.5, 0.5, 1.0, 1.0);
            let pixels = match (detector.wants_pixels(), input.image) {
                (false, _) => None,
                (true, Some(image)) => Some(image.sample_region(&region, resolution_px)),
                (true, None) => {
                    return Err(Error::Config(
                        "crop counting detector needs pixels but the input has no image".into(),
                    ))
                }
            };
            let sample =
                RegionSample { image_id: input.image_id, region, pixels, scene: input.scene };
            let out = detector.detect(&sample)?;
            if out.grid != grid {
                return Err(Error::GridContract { expected: grid, got: out.grid });
            }
            let outcome = extract_crops(&out, &permissive, 1);
            Ok(outcome
                .crops
                .iter()
                .filter(|c| scene.boxes.iter().any(|b| b.intersection_area(&c.region) > 0.0))
                .count())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Pipeline evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: usize,
    pub total_truth: usize,
    pub total_detections: usize,
    pub map50: f64,
    pub map75: f64,
    pub mean_boxes_evaluated: f64,
    pub mean_pixels_processed: f64,
    pub max_boxes_evaluated: u64,
    pub max_pixels_processed: u64,
    pub box_budget: u64,
    pub pixel_budget: u64,
    /// Detections contributed by each stage, 1-based.
    pub detections_per_stage: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PipelineEvaluation {
    pub report: EvalReport,
    /// One run per input, in input order.
    pub runs: Vec<PipelineRun>,
}

/// Run the cascade over every input (in parallel, order-preserving) and
/// score pooled detections against ground truth.
pub fn evaluate_pipeline<D: Detector + Sync>(
    cfg: &PipelineConfig,
    detectors: &[D],
    inputs: &[SceneInput<'_>],
) -> Result<PipelineEvaluation> {
    if inputs.is_empty() {
        return Err(Error::EmptyValidationSet);
    }
    let runs: Vec<PipelineRun> = inputs
        .par_iter()
        .map(|input| {
            input
                .scene
                .ok_or_else(|| Error::Config("evaluation requires ground truth".into()))?;
            pipeline::run(cfg, detectors, input)
        })
        .collect::<Result<_>>()?;

    let samples: Vec<EvalSample<'_>> = runs
        .iter()
        .zip(inputs)
        .map(|(run, input)| EvalSample {
            detections: &run.detections,
            truth: &input.scene.expect("checked above").boxes,
        })
        .collect();

    let map50 = average_precision(&samples, 0.5);
    let map75 = average_precision(&samples, 0.75);

    let n = runs.len() as f64;
    let stages = cfg.stages.len();
    let mut detections_per_stage = vec![0usize; stages];
    let mut total_detections = 0usize;
    for run in &runs {
        for d in &run.detections {
            detections_per_stage[d.stage - 1] += 1;
            total_detections += 1;
        }
    }
    let report = EvalReport {
        images: runs.len(),
        total_truth: samples.iter().map(|s| s.truth.len()).sum(),
        total_detections,
        map50,
        map75,
        mean_boxes_evaluated: runs.iter().map(|r| r.cost.boxes_evaluated).sum::<u64>() as f64 / n,
        mean_pixels_processed: runs.iter().map(|r| r.cost.pixels_processed).sum::<u64>() as f64
            / n,
        max_boxes_evaluated: runs.iter().map(|r| r.cost.boxes_evaluated).max().unwrap_or(0),
        max_pixels_processed: runs.iter().map(|r| r.cost.pixels_processed).max().unwrap_or(0),
        box_budget: cfg.box_budget()?,
        pixel_budget: cfg.pixel_budget()?,
        detections_per_stage,
    };
    Ok(PipelineEvaluation { report, runs })
}

// ---------------------------------------------------------------------------
// Threshold sweep
// ---------------------------------------------------------------------------

pub const STANDARD_TAU_LOW: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];
pub const STANDARD_TAU_HIGH: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];
pub const STANDARD_TAU_NMS: [f64; 3] = [0.25, 0.5, 0.75];

/// The default sweep: every combination of the standard threshold values for
/// each requested crop quota, in row-major order (gamma, then tau_low, then
/// tau_high, then tau_nms).
pub fn standard_sweep_grid(gammas: &[usize]) -> Vec<TransitionConfig> {
    let mut grid = Vec::new();
    for &gamma in gammas {
        for &tau_low in &STANDARD_TAU_LOW {
            for &tau_high in &STANDARD_TAU_HIGH {
                for &tau_nms in &STANDARD_TAU_NMS {
                    grid.push(TransitionConfig { tau_low, tau_high, tau_nms, gamma });
                }
            }
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub transition: TransitionConfig,
    pub map50: f64,
    pub map75: f64,
    pub box_budget: u64,
    pub pixel_budget: u64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    /// One point per candidate, in candidate order.
    pub points: Vec<SweepPoint>,
    /// Index of the selected point: highest mAP@0.5, then lowest box
    /// budget, then earliest in the grid.
    pub best: usize,
}

impl SweepResult {
    pub fn best_point(&self) -> &SweepPoint {
        &self.points[self.best]
    }
}

/// Evaluate `base` with every candidate transition applied to all its
/// intermediate stages, and pick the accuracy/cost optimum.
pub fn hyperparameter_sweep<D: Detector + Sync>(
    base: &PipelineConfig,
    detectors: &[D],
    inputs: &[SceneInput<'_>],
    candidates: &[TransitionConfig],
) -> Result<SweepResult> {
    base.validate()?;
    if base.stages.len() < 2 {
        return Err(Error::Config("a sweep needs a cascade with at least one transition".into()));
    }
    if candidates.is_empty() {
        return Err(Error::Config("sweep candidate grid is empty".into()));
    }
    let points: Vec<SweepPoint> = candidates
        .par_iter()
        .map(|t| {
            t.validate()?;
            let mut cfg = base.clone();
            let last = cfg.stages.len() - 1;
            for stage in &mut cfg.stages[..last] {
                stage.transition = Some(*t);
            }
            let eval = evaluate_pipeline(&cfg, detectors, inputs)?;
            Ok(SweepPoint {
                transition: *t,
                map50: eval.report.map50,
                map75: eval.report.map75,
                box_budget: cfg.box_budget()?,
                pixel_budget: cfg.pixel_budget()?,
            })
        })
        .collect::<Result<_>>()?;

    let mut best = 0usize;
    for (i, p) in points.iter().enumerate().skip(1) {
        let b = &points[best];
        if p.map50 > b.map50 || (p.map50 == b.map50 && p.box_budget < b.box_budget) {
            best = i;
        }
    }
    Ok(SweepResult { points, best })
}
