//! Per-cell predictions, activations, and the training losses with their
//! analytic gradients.
//!
//! A prediction cell carries a decoded box, an activated confidence in
//! `[0,1]`, and raw logits for the group flag and the two rescaling offsets.
//! Losses are sums over cells, not means:
//!
//! - group loss: binary cross-entropy of the group flag on occupied cells;
//! - coordinate loss: squared error on box coordinates plus a weighted
//!   confidence term `(c - c̄)²` on occupied cells, where the confidence
//!   target `c̄` is the current IoU against the cell target (treated as a
//!   constant), plus a no-object term `ω_noobj · c²` on empty cells;
//! - offset loss: squared error of the activated offsets against resolved
//!   offset targets on occupied cells.
//!
//! Final stages train with the coordinate loss only.

use serde::{Deserialize, Serialize};

use crate::boxgeom::{self, BBox, GridSpec, MIN_OFFSET};
use crate::grouping::{self, TargetGrid};
use crate::{Error, Result};

/// Logit magnitude used when an exact 0/1 probability is needed (oracles,
/// ablations). `sigmoid(40)` is 1 within f64 rounding.
pub const BIG_LOGIT: f64 = 40.0;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Offset activation: a logistic squashed into `(MIN_OFFSET, 1]` so a raw
/// predictor output can never request an unbounded crop enlargement.
pub fn offset_activation(z: f64) -> f64 {
    MIN_OFFSET + (1.0 - MIN_OFFSET) * sigmoid(z)
}

pub fn offset_activation_deriv(z: f64) -> f64 {
    let s = sigmoid(z);
    (1.0 - MIN_OFFSET) * s * (1.0 - s)
}

/// Inverse of [`offset_activation`], clamped away from the saturated ends.
pub fn offset_logit(o: f64) -> f64 {
    logit((o - MIN_OFFSET) / (1.0 - MIN_OFFSET))
}

/// One grid cell's prediction. The box is already decoded to image
/// coordinates of the stage's input frame; confidence is post-activation;
/// group flag and offsets stay as raw logits so losses can differentiate
/// through their activations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellPrediction {
    pub bbox: BBox,
    pub confidence: f64,
    pub group_logit: f64,
    pub offset_logits: (f64, f64),
}

impl CellPrediction {
    /// An inert cell: zero box, zero confidence, group off, offsets at 1.
    pub fn inert() -> Self {
        CellPrediction {
            bbox: BBox::ZERO,
            confidence: 0.0,
            group_logit: -BIG_LOGIT,
            offset_logits: (BIG_LOGIT, BIG_LOGIT),
        }
    }

    pub fn group_prob(&self) -> f64 {
        sigmoid(self.group_logit)
    }

    /// Group flag binarized at probability 0.5.
    pub fn group_flag(&self) -> bool {
        self.group_prob() > 0.5
    }

    pub fn offsets(&self) -> (f64, f64) {
        (offset_activation(self.offset_logits.0), offset_activation(self.offset_logits.1))
    }
}

/// One stage's full prediction: exactly one cell per grid cell, row-major.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub grid: GridSpec,
    pub cells: Vec<CellPrediction>,
}

impl StageOutput {
    pub fn new(grid: GridSpec, cells: Vec<CellPrediction>) -> Result<Self> {
        if cells.len() != grid.cell_count() {
            return Err(Error::Config(format!(
                "stage output has {} cells, grid needs {}",
                cells.len(),
                grid.cell_count()
            )));
        }
        Ok(StageOutput { grid, cells })
    }

    pub fn inert(grid: GridSpec) -> Self {
        StageOutput { grid, cells: vec![CellPrediction::inert(); grid.cell_count()] }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub conf: f64,
    pub noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { conf: 5.0, noobj: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageRole {
    /// Trains all three terms and feeds a transition.
    Intermediate,
    /// Last stage: coordinate loss only.
    Final,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossBreakdown {
    pub groups: f64,
    pub coords: f64,
    pub offsets: f64,
    pub total: f64,
}

fn check_grids(out: &StageOutput, targets: &TargetGrid) -> Result<()> {
    if out.grid != targets.grid {
        return Err(Error::GridMismatch { expected: targets.grid, got: out.grid });
    }
    Ok(())
}

/// Fill in the offset targets of `targets` for the current predictions.
/// Offset targets depend on the predicted boxes, so they are recomputed per
/// forward pass and then treated as constants by the offset loss.
pub fn resolve_offset_targets(
    targets: &TargetGrid,
    out: &StageOutput,
    margin: f64,
) -> Result<TargetGrid> {
    check_grids(out, targets)?;
    let mut resolved = targets.clone();
    for (cell, pred) in resolved.cells.iter_mut().zip(&out.cells) {
        if cell.occupied {
            cell.offsets = Some(grouping::offset_targets(&pred.bbox, &cell.target_box, margin));
        }
    }
    Ok(resolved)
}

/// Confidence targets `c̄`: IoU of each occupied cell's prediction against
/// its target box, 0 for empty cells. Recomputed per forward pass and held
/// constant by the coordinate loss gradient.
pub fn confidence_targets(out: &StageOutput, targets: &TargetGrid) -> Result<Vec<f64>> {
    check_grids(out, targets)?;
    Ok(out
        .cells
        .iter()
        .zip(&targets.cells)
        .map(|(p, t)| if t.occupied { boxgeom::iou(&p.bbox, &t.target_box) } else { 0.0 })
        .collect())
}

#[derive(Debug, Clone)]
pub struct GroupLoss {
    pub value: f64,
    /// d(loss)/d(group logit) per cell; zero on empty cells.
    pub grad_group_logit: Vec<f64>,
}

/// Binary cross-entropy of the group flag over occupied cells.
pub fn group_loss(out: &StageOutput, targets: &TargetGrid) -> Result<GroupLoss> {
    check_grids(out, targets)?;
    let mut value = 0.0;
    let mut grad = vec![0.0; out.cells.len()];
    for (k, (p, t)) in out.cells.iter().zip(&targets.cells).enumerate() {
        if !t.occupied {
            continue;
        }
        let z = p.group_logit;
        let y = if t.group_flag { 1.0 } else { 0.0 };
        // Numerically stable `softplus(z) - z*y`.
        value += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad[k] = sigmoid(z) - y;
    }
    Ok(GroupLoss { value, grad_group_logit: grad })
}

#[derive(Debug, Clone)]
pub struct CoordsLoss {
    pub value: f64,
    /// d(loss)/d(cx, cy, w, h) per cell.
    pub grad_box: Vec<[f64; 4]>,
    /// d(loss)/d(confidence) per cell.
    pub grad_confidence: Vec<f64>,
    /// The `c̄` values the loss was evaluated against.
    pub confidence_targets: Vec<f64>,
}

/// Coordinate-and-confidence loss with `c̄` recomputed from the current
/// predictions.
pub fn coords_loss(out: &StageOutput, targets: &TargetGrid, weights: &LossWeights) -> Result<CoordsLoss> {
    let cbar = confidence_targets(out, targets)?;
    coords_loss_with_targets(out, targets, weights, &cbar)
}

/// Coordinate-and-confidence loss against explicitly supplied (frozen)
/// confidence targets. The gradient never flows through `c̄`.
pub fn coords_loss_with_targets(
    out: &StageOutput,
    targets: &TargetGrid,
    weights: &LossWeights,
    cbar: &[f64],
) -> Result<CoordsLoss> {
    check_grids(out, targets)?;
    if cbar.len() != out.cells.len() {
        return Err(Error::Config("confidence target length mismatch".into()));
    }
    let n = out.cells.len();
    let mut value = 0.0;
    let mut grad_box = vec![[0.0; 4]; n];
    let mut grad_conf = vec![0.0; n];
    for (k, (p, t)) in out.cells.iter().zip(&targets.cells).enumerate() {
        if t.occupied {
            let d = [
                p.bbox.cx - t.target_box.cx,
                p.bbox.cy - t.target_box.cy,
                p.bbox.w - t.target_box.w,
                p.bbox.h - t.target_box.h,
            ];
            for (g, di) in grad_box[k].iter_mut().zip(d) {
                value += di * di;
                *g = 2.0 * di;
            }
            let dc = p.confidence - cbar[k];
            value += weights.conf * dc * dc;
            grad_conf[k] = 2.0 * weights.conf * dc;
        } else {
            value += weights.noobj * p.confidence * p.confidence;
            grad_conf[k] = 2.0 * weights.noobj * p.confidence;
        }
    }
    Ok(CoordsLoss { value, grad_box, grad_confidence: grad_conf, confidence_targets: cbar.to_vec() })
}

#[derive(Debug, Clone)]
pub struct OffsetsLoss {
    pub value: f64,
    /// d(loss)/d(offset logits) per cell.
    pub grad_offset_logits: Vec<(f64, f64)>,
}

/// Squared error of activated offsets against resolved targets on occupied
/// cells. Requires [`resolve_offset_targets`] to have been applied.
pub fn offsets_loss(out: &StageOutput, targets: &TargetGrid) -> Result<OffsetsLoss> {
    check_grids(out, targets)?;
    let mut value = 0.0;
    let mut grad = vec![(0.0, 0.0); out.cells.len()];
    for (k, (p, t)) in out.cells.iter().zip(&targets.cells).enumerate() {
        if !t.occupied {
            continue;
        }
        let (tw, th) = t.offsets.ok_or(Error::UnresolvedOffsets)?;
        let (zw, zh) = p.offset_logits;
        let (ow, oh) = (offset_activation(zw), offset_activation(zh));
        value += (ow - tw) * (ow - tw) + (oh - th) * (oh - th);
        grad[k] = (
            2.0 * (ow - tw) * offset_activation_deriv(zw),
            2.0 * (oh - th) * offset_activation_deriv(zh),
        );
    }
    Ok(OffsetsLoss { value, grad_offset_logits: grad })
}

/// Gradients of the total stage loss with respect to the raw per-cell
/// quantities: decoded box coordinates, activated confidence, and the group
/// and offset logits.
#[derive(Debug, Clone)]
pub struct StageGradients {
    pub bbox: Vec<[f64; 4]>,
    pub confidence: Vec<f64>,
    pub group_logit: Vec<f64>,
    pub offset_logits: Vec<(f64, f64)>,
}

impl StageGradients {
    pub fn zeros(n: usize) -> Self {
        StageGradients {
            bbox: vec![[0.0; 4]; n],
            confidence: vec![0.0; n],
            group_logit: vec![0.0; n],
            offset_logits: vec![(0.0, 0.0); n],
        }
    }
}

/// Total loss for a stage. Intermediate stages sum all three terms; the
/// final stage uses the coordinate loss only.
pub fn total_loss(
    out: &StageOutput,
    targets: &TargetGrid,
    weights: &LossWeights,
    role: StageRole,
) -> Result<LossBreakdown> {
    Ok(total_loss_with_grads(out, targets, weights, role)?.0)
}

pub fn total_loss_with_grads(
    out: &StageOutput,
    targets: &TargetGrid,
    weights: &LossWeights,
    role: StageRole,
) -> Result<(LossBreakdown, StageGradients)> {
    let coords = coords_loss(out, targets, weights)?;
    let mut grads = StageGradients::zeros(out.cells.len());
    grads.bbox = coords.grad_box;
    grads.confidence = coords.grad_confidence;
    let mut breakdown = LossBreakdown { coords: coords.value, ..Default::default() };
    if role == StageRole::Intermediate {
        let groups = group_loss(out, targets)?;
        let offsets = offsets_loss(out, targets)?;
        breakdown.groups = groups.value;
        breakdown.offsets = offsets.value;
        grads.group_logit = groups.grad_group_logit;
        grads.offset_logits = offsets.grad_offset_logits;
    }
    breakdown.total = breakdown.groups + breakdown.coords + breakdown.offsets;
    Ok((breakdown, grads))
}

/// Total loss value with every prediction-dependent target frozen: `c̄` is
/// supplied, and offset targets are read from `targets` as-is. This is the
/// function a finite-difference check must differentiate for the analytic
/// gradients to be comparable.
pub fn frozen_total_loss(
    out: &StageOutput,
    targets: &TargetGrid,
    weights: &LossWeights,
    role: StageRole,
    cbar: &[f64],
) -> Result<f64> {
    let coords = coords_loss_with_targets(out, targets, weights, cbar)?;
    let mut total = coords.value;
    if role == StageRole::Intermediate {
        total += group_loss(out, targets)?.value;
        total += offsets_loss(out, targets)?.value;
    }
    Ok(total)
}
