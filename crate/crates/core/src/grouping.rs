//! Ground-truth construction for grid detectors that predict one box per
//! cell: which objects belong to which cell, the per-cell regression target
//! (a single object or the enclosing union of several), the binary group
//! flag, and the rescaling offsets that make a predicted box grow into a
//! crop that safely encloses its target.

use serde::{Deserialize, Serialize};

use crate::boxgeom::{self, BBox, CellIndex, GridSpec};
use crate::{Error, Result};

/// Margin added around a target before computing offsets, in image units.
/// Chosen at roughly half a typical small-object side so crops keep a little
/// context around the objects they enclose.
pub const DEFAULT_MARGIN: f64 = 0.0025;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthScene {
    pub image_id: String,
    pub image_size_px: u32,
    pub boxes: Vec<BBox>,
}

impl GroundTruthScene {
    pub fn new(image_id: impl Into<String>, image_size_px: u32, boxes: Vec<BBox>) -> Self {
        GroundTruthScene { image_id: image_id.into(), image_size_px, boxes }
    }
}

/// Which ground-truth boxes overlap which cells. A box is assigned to every
/// cell its extent overlaps with strictly positive area; touching a cell
/// border contributes nothing.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub grid: GridSpec,
    per_cell: Vec<Vec<usize>>,
    n_boxes: usize,
}

impl Assignment {
    /// Indices of the boxes assigned to a cell, in ascending order.
    pub fn assigned(&self, cell: CellIndex) -> &[usize] {
        &self.per_cell[self.grid.flat(cell)]
    }

    pub fn is_assigned(&self, cell: CellIndex, box_idx: usize) -> bool {
        self.per_cell[self.grid.flat(cell)].binary_search(&box_idx).is_ok()
    }

    pub fn n_boxes(&self) -> usize {
        self.n_boxes
    }

    pub fn occupied_cells(&self) -> usize {
        self.per_cell.iter().filter(|v| !v.is_empty()).count()
    }

    pub fn empty_cells(&self) -> usize {
        self.grid.cell_count() - self.occupied_cells()
    }
}

/// Compute the cell assignment of a scene on a grid.
pub fn assign(scene: &GroundTruthScene, grid: GridSpec) -> Assignment {
    let mut per_cell = vec![Vec::new(); grid.cell_count()];
    let (rows, cols) = (grid.rows as f64, grid.cols as f64);
    for (n, b) in scene.boxes.iter().enumerate() {
        let Some((x0, y0, x1, y1)) = b.clipped_extent() else { continue };
        let j0 = (x0 * cols).floor().max(0.0) as usize;
        let j1 = ((x1 * cols).ceil() as usize).min(grid.cols);
        let i0 = (y0 * rows).floor().max(0.0) as usize;
        let i1 = ((y1 * rows).ceil() as usize).min(grid.rows);
        for i in i0..i1 {
            for j in j0..j1 {
                let (cx0, cy0, cx1, cy1) = grid.cell_bounds(CellIndex { row: i, col: j });
                let w = x1.min(cx1) - x0.max(cx0);
                let h = y1.min(cy1) - y0.max(cy0);
                if w > 0.0 && h > 0.0 {
                    per_cell[i * grid.cols + j].push(n);
                }
            }
        }
    }
    Assignment { grid, per_cell, n_boxes: scene.boxes.len() }
}

/// Regression target for one cell.
///
/// `offsets` starts out unresolved: offset targets depend on the current
/// prediction, so they are filled in per forward pass (see
/// `losses::resolve_offset_targets`).
#[derive(Debug, Clone)]
pub struct CellTarget {
    pub occupied: bool,
    pub target_box: BBox,
    pub group_flag: bool,
    pub offsets: Option<(f64, f64)>,
}

impl CellTarget {
    pub fn empty() -> Self {
        CellTarget { occupied: false, target_box: BBox::ZERO, group_flag: false, offsets: None }
    }
}

#[derive(Debug, Clone)]
pub struct TargetGrid {
    pub grid: GridSpec,
    pub cells: Vec<CellTarget>,
}

impl TargetGrid {
    pub fn from_scene(scene: &GroundTruthScene, grid: GridSpec) -> TargetGrid {
        build_targets(&assign(scene, grid), scene)
    }

    pub fn cell(&self, cell: CellIndex) -> &CellTarget {
        &self.cells[self.grid.flat(cell)]
    }

    pub fn occupied_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.occupied).count()
    }
}

/// Build per-cell targets from an assignment: a cell with one box regresses
/// to that box with the group flag off; a cell with several regresses to
/// their minimum enclosing box with the group flag on.
pub fn build_targets(assignment: &Assignment, scene: &GroundTruthScene) -> TargetGrid {
    let grid = assignment.grid;
    let cells = grid
        .cells()
        .map(|cell| {
            let idxs = assignment.assigned(cell);
            if idxs.is_empty() {
                return CellTarget::empty();
            }
            let target_box = boxgeom::enclosing_union(idxs.iter().map(|&n| &scene.boxes[n]))
                .expect("non-empty by construction");
            CellTarget {
                occupied: true,
                target_box,
                group_flag: idxs.len() > 1,
                offsets: None,
            }
        })
        .collect();
    TargetGrid { grid, cells }
}

fn offset_target_axis(pred_c: f64, pred_len: f64, tgt_c: f64, tgt_len: f64, margin: f64) -> f64 {
    // Distance from the prediction center to the farther edge of the
    // margin-dilated target; doubling it gives the full length the prediction
    // must reach after rescaling.
    let hi = (tgt_c + 0.5 * tgt_len + margin - pred_c).abs();
    let lo = (tgt_c - 0.5 * tgt_len - margin - pred_c).abs();
    let required = 2.0 * hi.max(lo);
    if required <= 0.0 {
        return 1.0;
    }
    (pred_len / required).clamp(boxgeom::MIN_OFFSET, 1.0)
}

/// Offset targets `(ō_w, ō_h)` for a predicted box against its cell target:
/// the factors by which the prediction's sides must be divided so that the
/// enlarged box covers the target dilated by `margin` on every side, while
/// still containing the prediction itself. Values live in `(0, 1]`; 1 means
/// "already large enough".
pub fn offset_targets(pred: &BBox, target: &BBox, margin: f64) -> (f64, f64) {
    (
        offset_target_axis(pred.cx, pred.w, target.cx, target.w, margin),
        offset_target_axis(pred.cy, pred.h, target.cy, target.h, margin),
    )
}

/// Restrict a scene to a region: keep boxes whose intersection with the
/// region is positive and at least `min_area_ratio` of the box's own area,
/// clip them to the region, and express them in region-local coordinates.
pub fn restrict_to_region(
    scene: &GroundTruthScene,
    region: &BBox,
    min_area_ratio: f64,
) -> Result<GroundTruthScene> {
    if region.w <= 0.0 || region.h <= 0.0 {
        return Err(Error::ZeroAreaRegion);
    }
    let (rx0, ry0, rx1, ry1) = region.extent();
    let mut boxes = Vec::new();
    for b in &scene.boxes {
        let area = b.area();
        if area <= 0.0 {
            continue;
        }
        let inter = b.intersection_area(region);
        if inter <= 0.0 || inter / area < min_area_ratio {
            continue;
        }
        let (bx0, by0, bx1, by1) = b.extent();
        let clipped = BBox::from_extent(bx0.max(rx0), by0.max(ry0), bx1.min(rx1), by1.min(ry1));
        boxes.push(boxgeom::to_frame(&clipped, region)?);
    }
    Ok(GroundTruthScene::new(scene.image_id.clone(), scene.image_size_px, boxes))
}
