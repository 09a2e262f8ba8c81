//! The stage transition: decide per cell whether a prediction is discarded,
//! exits the cascade as a final detection, or is refined by the next stage;
//! suppress overlapping refinement candidates; and turn the survivors into
//! rescaled, clipped crop regions.
//!
//! Decision rules for confidence `c` and binarized group flag `g`:
//! - `c <= tau_low`: discard;
//! - `c > tau_high` and `g = 0`: early exit — a confident isolated object
//!   needs no refinement and is propagated unchanged to the final output;
//! - otherwise (confident group, or mid-confidence single): refine.
//!
//! In training mode (`tau_low = 0`, `tau_high = 1`, `tau_nms = 1`,
//! `gamma = 10`) nothing exits early and nothing overlapping is suppressed,
//! so every cell with positive confidence becomes a crop candidate.

use serde::{Deserialize, Serialize};

use crate::boxgeom::{self, BBox};
use crate::losses::{CellPrediction, StageOutput};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionConfig {
    pub tau_low: f64,
    pub tau_high: f64,
    pub tau_nms: f64,
    /// Maximum number of crops handed to the next stage.
    pub gamma: usize,
}

impl TransitionConfig {
    pub fn new(tau_low: f64, tau_high: f64, tau_nms: f64, gamma: usize) -> Result<Self> {
        let cfg = TransitionConfig { tau_low, tau_high, tau_nms, gamma };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The permissive configuration used while training a following stage:
    /// keep every positive-confidence box, up to 10 crops.
    pub fn training() -> Self {
        TransitionConfig { tau_low: 0.0, tau_high: 1.0, tau_nms: 1.0, gamma: 10 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_low", self.tau_low),
            ("tau_high", self.tau_high),
            ("tau_nms", self.tau_nms),
        ] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be in [0,1], got {v}")));
            }
        }
        if self.tau_low > self.tau_high {
            return Err(Error::Config(format!(
                "tau_low ({}) must not exceed tau_high ({})",
                self.tau_low, self.tau_high
            )));
        }
        if self.gamma == 0 {
            return Err(Error::Config("gamma must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Discard,
    EarlyExit,
    Refine,
}

/// Apply the transition rules to one confidence/group pair.
pub fn classify(confidence: f64, group: bool, cfg: &TransitionConfig) -> FilterDecision {
    if confidence <= cfg.tau_low {
        FilterDecision::Discard
    } else if confidence > cfg.tau_high && !group {
        FilterDecision::EarlyExit
    } else {
        FilterDecision::Refine
    }
}

pub fn classify_prediction(pred: &CellPrediction, cfg: &TransitionConfig) -> FilterDecision {
    classify(pred.confidence, pred.group_flag(), cfg)
}

/// How the transition reads group flags. `Ignored` models the ablation that
/// removes group supervision: every prediction is treated as an individual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupPolicy {
    Predicted,
    Ignored,
}

/// How crop regions are rescaled before extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OffsetPolicy {
    /// Divide by the predicted offsets.
    Predicted,
    /// Divide by a constant offset on both axes.
    Fixed(f64),
    /// No rescaling: crops are the raw suppression survivors.
    Disabled,
}

/// Greedy non-maximum suppression. Candidates are ranked by descending
/// confidence (ties keep input order); each kept box suppresses every later
/// candidate whose IoU with it strictly exceeds `tau_nms`. Returns the kept
/// candidate indices in rank order, at most `limit` of them.
pub fn nms(candidates: &[(BBox, f64)], tau_nms: f64, limit: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].1.total_cmp(&candidates[a].1).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut suppressed = vec![false; candidates.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        if kept.len() == limit {
            break;
        }
        for &j in &order {
            if !suppressed[j] && j != i && boxgeom::iou(&candidates[i].0, &candidates[j].0) > tau_nms {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// A region selected for refinement by the next stage, in the coordinates of
/// the stage input it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRegion {
    pub region: BBox,
    pub source_confidence: f64,
    pub source_group: bool,
}

/// A detection that left the cascade, in the coordinates of the frame it was
/// produced in (the pipeline maps it back to image coordinates).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredDetection {
    pub bbox: BBox,
    pub confidence: f64,
    /// 1-based index of the stage that produced the detection.
    pub stage: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TransitionOutcome {
    pub crops: Vec<CropRegion>,
    pub early_exits: Vec<ScoredDetection>,
}

/// A refinement candidate before suppression: its box, confidence, group
/// flag, and the offsets a crop would be rescaled by (`None` when rescaling
/// is disabled).
#[derive(Debug, Clone, Copy)]
pub struct RefineCandidate {
    pub bbox: BBox,
    pub confidence: f64,
    pub group: bool,
    pub offsets: Option<(f64, f64)>,
}

/// Split a stage output into early exits and refinement candidates, in
/// row-major cell order.
pub fn split_decisions(
    out: &StageOutput,
    cfg: &TransitionConfig,
    stage: usize,
    group_policy: GroupPolicy,
    offset_policy: OffsetPolicy,
) -> (Vec<ScoredDetection>, Vec<RefineCandidate>) {
    let mut exits = Vec::new();
    let mut candidates = Vec::new();
    for pred in &out.cells {
        let group = match group_policy {
            GroupPolicy::Predicted => pred.group_flag(),
            GroupPolicy::Ignored => false,
        };
        match classify(pred.confidence, group, cfg) {
            FilterDecision::Discard => {}
            FilterDecision::EarlyExit => exits.push(ScoredDetection {
                bbox: pred.bbox.clip_to_unit(),
                confidence: pred.confidence,
                stage,
            }),
            FilterDecision::Refine => candidates.push(RefineCandidate {
                bbox: pred.bbox,
                confidence: pred.confidence,
                group,
                offsets: match offset_policy {
                    OffsetPolicy::Predicted => Some(pred.offsets()),
                    OffsetPolicy::Fixed(v) => Some((v, v)),
                    OffsetPolicy::Disabled => None,
                },
            }),
        }
    }
    (exits, candidates)
}

/// Turn suppression survivors into crop regions: rescale according to their
/// offsets, clip to the frame, and drop anything left with zero area.
pub fn crops_from_candidates(
    candidates: &[RefineCandidate],
    tau_nms: f64,
    gamma: usize,
) -> Vec<CropRegion> {
    let ranked: Vec<(BBox, f64)> = candidates.iter().map(|c| (c.bbox, c.confidence)).collect();
    nms(&ranked, tau_nms, gamma)
        .into_iter()
        .filter_map(|i| {
            let c = &candidates[i];
            let region = match c.offsets {
                Some((ow, oh)) => boxgeom::rescale_by_offsets(&c.bbox, ow, oh),
                None => c.bbox,
            }
            .clip_to_unit();
            (region.w > 0.0 && region.h > 0.0).then_some(CropRegion {
                region,
                source_confidence: c.confidence,
                source_group: c.group,
            })
        })
        .collect()
}

/// Full transition for one stage output.
pub fn extract_crops(out: &StageOutput, cfg: &TransitionConfig, stage: usize) -> TransitionOutcome {
    extract_crops_with(out, cfg, stage, GroupPolicy::Predicted, OffsetPolicy::Predicted)
}

pub fn extract_crops_with(
    out: &StageOutput,
    cfg: &TransitionConfig,
    stage: usize,
    group_policy: GroupPolicy,
    offset_policy: OffsetPolicy,
) -> TransitionOutcome {
    let (early_exits, candidates) = split_decisions(out, cfg, stage, group_policy, offset_policy);
    TransitionOutcome {
        crops: crops_from_candidates(&candidates, cfg.tau_nms, cfg.gamma),
        early_exits,
    }
}

/// Map a box expressed in crop-local coordinates back to the crop's parent
/// frame. Errors on zero-area crops.
pub fn map_to_parent(local: &BBox, crop: &BBox) -> Result<BBox> {
    boxgeom::from_frame(local, crop)
}

/// Express a parent-frame box in crop-local coordinates.
pub fn to_crop_frame(b: &BBox, crop: &BBox) -> Result<BBox> {
    boxgeom::to_frame(b, crop)
}
