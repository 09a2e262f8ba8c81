//! Axis-aligned boxes in normalized image coordinates and the square grids
//! used to parameterize per-cell predictions.
//!
//! Boxes are stored center-size: `(cx, cy, w, h)` with the image mapped to
//! the unit square. All area computations use the box extent clipped to
//! `[0,1]²`, so degenerate or partially-outside boxes never produce negative
//! areas. Degenerate boxes (zero width or height) are legal values: they have
//! area 0 and IoU 0 against anything.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Smallest admissible rescaling offset. Offsets at or below this value are
/// clamped before the division in [`rescale_by_offsets`] so noisy predictors
/// cannot blow a crop up without bound.
pub const MIN_OFFSET: f64 = 1e-3;

static OFFSET_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of times [`rescale_by_offsets`] had to clamp an out-of-range
/// offset since process start. Purely diagnostic.
pub fn offset_clamp_count() -> u64 {
    OFFSET_CLAMPS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const ZERO: BBox = BBox { cx: 0.0, cy: 0.0, w: 0.0, h: 0.0 };

    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_extent(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// Raw `(x0, y0, x1, y1)` extent, not clipped to the unit square.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    /// Extent intersected with `[0,1]²`, or `None` when that intersection is
    /// empty (including negative-size boxes).
    pub fn clipped_extent(&self) -> Option<(f64, f64, f64, f64)> {
        let (x0, y0, x1, y1) = self.extent();
        let (x0, y0, x1, y1) = (x0.max(0.0), y0.max(0.0), x1.min(1.0), y1.min(1.0));
        if x1 > x0 && y1 > y0 {
            Some((x0, y0, x1, y1))
        } else {
            None
        }
    }

    /// Area of the clipped extent.
    pub fn area(&self) -> f64 {
        match self.clipped_extent() {
            Some((x0, y0, x1, y1)) => (x1 - x0) * (y1 - y0),
            None => 0.0,
        }
    }

    /// Overlap area of the clipped extents of `self` and `other`.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let (Some(a), Some(b)) = (self.clipped_extent(), other.clipped_extent()) else {
            return 0.0;
        };
        let w = a.2.min(b.2) - a.0.max(b.0);
        let h = a.3.min(b.3) - a.1.max(b.1);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    /// The box spanned by the clipped extent; [`BBox::ZERO`] when empty.
    /// A box already inside the unit square is returned unchanged, so
    /// clipping never perturbs coordinates that need no clipping.
    pub fn clip_to_unit(&self) -> BBox {
        let (x0, y0, x1, y1) = self.extent();
        if x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0 && self.w >= 0.0 && self.h >= 0.0 {
            return *self;
        }
        match self.clipped_extent() {
            Some((x0, y0, x1, y1)) => BBox::from_extent(x0, y0, x1, y1),
            None => BBox::ZERO,
        }
    }

    /// Containment on raw extents with a symmetric tolerance.
    pub fn contains(&self, other: &BBox, tol: f64) -> bool {
        let (ax0, ay0, ax1, ay1) = self.extent();
        let (bx0, by0, bx1, by1) = other.extent();
        bx0 >= ax0 - tol && by0 >= ay0 - tol && bx1 <= ax1 + tol && by1 <= ay1 + tol
    }

    /// Grow each side by `margin` (total growth `2 * margin` per axis).
    pub fn dilate(&self, margin: f64) -> BBox {
        BBox::new(self.cx, self.cy, self.w + 2.0 * margin, self.h + 2.0 * margin)
    }
}

/// Intersection over union of the clipped extents. Returns 0 when the union
/// has zero area, so two degenerate boxes compare at 0, not NaN.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Minimum enclosing box of a non-empty set, computed over raw extents.
/// A singleton set returns its box unchanged (no extent round-trip).
pub fn enclosing_union<'a, I>(boxes: I) -> Result<BBox>
where
    I: IntoIterator<Item = &'a BBox>,
{
    let mut iter = boxes.into_iter();
    let first = *iter.next().ok_or(Error::EmptyUnion)?;
    let mut bounds: Option<(f64, f64, f64, f64)> = None;
    for b in iter {
        let (x0, y0, x1, y1) = b.extent();
        let (a0, b0, a1, b1) = bounds.unwrap_or_else(|| first.extent());
        bounds = Some((a0.min(x0), b0.min(y0), a1.max(x1), b1.max(y1)));
    }
    Ok(match bounds {
        None => first,
        Some((x0, y0, x1, y1)) => BBox::from_extent(x0, y0, x1, y1),
    })
}

/// Enlarge a box by dividing its size by per-axis offsets in `(MIN_OFFSET, 1]`.
/// The center is unchanged. Out-of-range offsets are clamped from below and
/// counted in [`offset_clamp_count`].
pub fn rescale_by_offsets(b: &BBox, o_w: f64, o_h: f64) -> BBox {
    let clamp = |o: f64| {
        if !(o > MIN_OFFSET) {
            OFFSET_CLAMPS.fetch_add(1, Ordering::Relaxed);
            MIN_OFFSET
        } else {
            o
        }
    };
    BBox::new(b.cx, b.cy, b.w / clamp(o_w), b.h / clamp(o_h))
}

/// A detection grid with `rows × cols` cells tiling the unit square.
/// Cell `(i, j)` covers `[j/cols, (j+1)/cols) × [i/rows, (i+1)/rows)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config("grid must have at least one cell".into()));
        }
        Ok(GridSpec { rows, cols })
    }

    pub fn square(n: usize) -> Result<Self> {
        GridSpec::new(n, n)
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Row-major flat index of a cell.
    pub fn flat(&self, cell: CellIndex) -> usize {
        debug_assert!(cell.row < self.rows && cell.col < self.cols);
        cell.row * self.cols + cell.col
    }

    pub fn cells(&self) -> impl Iterator<Item = CellIndex> + '_ {
        let cols = self.cols;
        (0..self.cell_count()).map(move |k| CellIndex { row: k / cols, col: k % cols })
    }

    /// `(x0, y0, x1, y1)` bounds of a cell in unit coordinates.
    pub fn cell_bounds(&self, cell: CellIndex) -> (f64, f64, f64, f64) {
        let (rows, cols) = (self.rows as f64, self.cols as f64);
        (
            cell.col as f64 / cols,
            cell.row as f64 / rows,
            (cell.col + 1) as f64 / cols,
            (cell.row + 1) as f64 / rows,
        )
    }
}

/// Map an input resolution to its detection grid: one cell per 32px block.
/// Resolutions that are not multiples of 32 are rejected rather than rounded.
pub fn resolution_to_grid(resolution_px: u32) -> Result<GridSpec> {
    if resolution_px == 0 || resolution_px % 32 != 0 {
        return Err(Error::UnsupportedResolution(resolution_px));
    }
    GridSpec::square((resolution_px / 32) as usize)
}

/// Express a box relative to a cell: the center in cell units (0 at the cell
/// origin, 1 at the opposite corner), the size unchanged.
pub fn encode_cell_relative(b: &BBox, cell: CellIndex, grid: GridSpec) -> [f64; 4] {
    [
        b.cx * grid.cols as f64 - cell.col as f64,
        b.cy * grid.rows as f64 - cell.row as f64,
        b.w,
        b.h,
    ]
}

/// Inverse of [`encode_cell_relative`].
pub fn decode_cell_relative(t: [f64; 4], cell: CellIndex, grid: GridSpec) -> BBox {
    BBox::new(
        (t[0] + cell.col as f64) / grid.cols as f64,
        (t[1] + cell.row as f64) / grid.rows as f64,
        t[2],
        t[3],
    )
}

/// Express `b` (given in the parent frame) in the local coordinates of
/// `frame`, where the frame maps to the unit square.
pub fn to_frame(b: &BBox, frame: &BBox) -> Result<BBox> {
    if frame.w <= 0.0 || frame.h <= 0.0 {
        return Err(Error::ZeroAreaRegion);
    }
    let (fx0, fy0, _, _) = frame.extent();
    Ok(BBox::new(
        (b.cx - fx0) / frame.w,
        (b.cy - fy0) / frame.h,
        b.w / frame.w,
        b.h / frame.h,
    ))
}

/// Map a box in the local coordinates of `frame` back to the parent frame.
pub fn from_frame(b: &BBox, frame: &BBox) -> Result<BBox> {
    if frame.w <= 0.0 || frame.h <= 0.0 {
        return Err(Error::ZeroAreaRegion);
    }
    let (fx0, fy0, _, _) = frame.extent();
    Ok(BBox::new(
        fx0 + b.cx * frame.w,
        fy0 + b.cy * frame.h,
        b.w * frame.w,
        b.h * frame.h,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn iou_identical_box_is_one() {
        let b = BBox::new(0.4, 0.6, 0.2, 0.1);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = BBox::new(0.2, 0.2, 0.1, 0.1);
        let b = BBox::new(0.8, 0.8, 0.1, 0.1);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_half_overlap_is_one_third() {
        // Extents [0, .5] and [.25, .75] on x, identical on y: overlap is half
        // of each box, so IoU = 0.125 / 0.375 = 1/3.
        let a = BBox::new(0.25, 0.25, 0.5, 0.5);
        let b = BBox::new(0.5, 0.25, 0.5, 0.5);
        assert!(approx(iou(&a, &b), 1.0 / 3.0, 1e-12));
    }

    #[test]
    fn degenerate_boxes_have_zero_area_and_iou() {
        let line = BBox::new(0.5, 0.5, 0.0, 0.3);
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(line.area(), 0.0);
        assert_eq!(iou(&line, &b), 0.0);
        assert_eq!(iou(&line, &line), 0.0);
        // Negative sizes behave like empty boxes instead of panicking.
        let neg = BBox::new(0.5, 0.5, -0.2, 0.1);
        assert_eq!(neg.area(), 0.0);
        assert_eq!(iou(&neg, &b), 0.0);
    }

    #[test]
    fn area_clips_to_unit_square() {
        let b = BBox::new(0.0, 0.0, 0.4, 0.4); // three quarters outside
        assert!(approx(b.area(), 0.04, 1e-15));
        let outside = BBox::new(2.0, 2.0, 0.5, 0.5);
        assert_eq!(outside.area(), 0.0);
    }

    #[test]
    fn enclosing_union_of_singleton_is_identity() {
        let b = BBox::new(0.3, 0.7, 0.2, 0.4);
        let u = enclosing_union(std::iter::once(&b)).unwrap();
        assert!(approx(u.cx, b.cx, 1e-15) && approx(u.w, b.w, 1e-15));
    }

    #[test]
    fn enclosing_union_spans_corners() {
        let a = BBox::new(0.1, 0.1, 0.2, 0.2);
        let b = BBox::new(0.9, 0.9, 0.2, 0.2);
        let u = enclosing_union(vec![a, b].iter()).unwrap();
        let (x0, y0, x1, y1) = u.extent();
        assert!(approx(x0, 0.0, 1e-15));
        assert!(approx(y0, 0.0, 1e-15));
        assert!(approx(x1, 1.0, 1e-15));
        assert!(approx(y1, 1.0, 1e-15));
    }

    #[test]
    fn enclosing_union_of_empty_set_errors() {
        assert!(matches!(enclosing_union(std::iter::empty()), Err(Error::EmptyUnion)));
    }

    #[test]
    fn union_area_matches_monte_carlo_sampling() {
        // Validates the inclusion-exclusion identity used inside iou() against
        // brute-force point sampling.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..12 {
            let rand_box = |rng: &mut ChaCha8Rng| {
                BBox::new(
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.05..0.5),
                    rng.gen_range(0.05..0.5),
                )
            };
            let a = rand_box(&mut rng);
            let b = rand_box(&mut rng);
            let analytic = a.area() + b.area() - a.intersection_area(&b);

            let n = 1_000_000usize;
            let mut hits = 0usize;
            for _ in 0..n {
                let p = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
                let inside = |bx: &BBox| {
                    let (x0, y0, x1, y1) = bx.extent();
                    p.0 >= x0 && p.0 < x1 && p.1 >= y0 && p.1 < y1
                };
                if inside(&a) || inside(&b) {
                    hits += 1;
                }
            }
            let sampled = hits as f64 / n as f64;
            assert!(
                approx(sampled, analytic, 1e-2),
                "monte carlo {sampled} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn grid_rule_maps_resolution_to_cells_per_32px() {
        assert_eq!(resolution_to_grid(1024).unwrap(), GridSpec { rows: 32, cols: 32 });
        assert_eq!(resolution_to_grid(512).unwrap(), GridSpec { rows: 16, cols: 16 });
        assert_eq!(resolution_to_grid(256).unwrap(), GridSpec { rows: 8, cols: 8 });
        assert_eq!(resolution_to_grid(64).unwrap(), GridSpec { rows: 2, cols: 2 });
        assert!(matches!(resolution_to_grid(100), Err(Error::UnsupportedResolution(100))));
        assert!(matches!(resolution_to_grid(0), Err(Error::UnsupportedResolution(0))));
    }

    #[test]
    fn encode_centers_box_in_cell() {
        let grid = GridSpec::square(8).unwrap();
        let cell = CellIndex { row: 2, col: 3 };
        // Box centered in cell (2,3): cell spans x [3/8, 4/8), y [2/8, 3/8).
        let b = BBox::new(3.5 / 8.0, 2.5 / 8.0, 0.05, 0.07);
        let t = encode_cell_relative(&b, cell, grid);
        assert!(approx(t[0], 0.5, 1e-12) && approx(t[1], 0.5, 1e-12));
        assert_eq!(t[2], 0.05);
        let back = decode_cell_relative(t, cell, grid);
        assert!(approx(back.cx, b.cx, 1e-12) && approx(back.cy, b.cy, 1e-12));
    }

    #[test]
    fn rescale_examples() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        let same = rescale_by_offsets(&b, 1.0, 1.0);
        assert_eq!(same, b);
        let grown = rescale_by_offsets(&b, 2.0 / 3.0, 0.5);
        assert!(approx(grown.w, 0.3, 1e-12));
        assert!(approx(grown.h, 0.4, 1e-12));
        assert_eq!(grown.cx, b.cx);
    }

    #[test]
    fn rescale_clamps_tiny_offsets_and_counts() {
        let b = BBox::new(0.5, 0.5, 0.1, 0.1);
        let before = offset_clamp_count();
        let r = rescale_by_offsets(&b, 0.0, MIN_OFFSET / 2.0);
        let after = offset_clamp_count();
        assert_eq!(after - before, 2);
        assert!(approx(r.w, 0.1 / MIN_OFFSET, 1e-9));
    }

    #[test]
    fn frame_transforms_roundtrip() {
        let frame = BBox::new(0.5, 0.4, 0.4, 0.2);
        let b = BBox::new(0.55, 0.45, 0.08, 0.04);
        let local = to_frame(&b, &frame).unwrap();
        let back = from_frame(&local, &frame).unwrap();
        assert!(approx(back.cx, b.cx, 1e-12) && approx(back.h, b.h, 1e-12));
        assert!(matches!(to_frame(&b, &BBox::ZERO), Err(Error::ZeroAreaRegion)));
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(
            ax in 0.0..1.0f64, ay in 0.0..1.0f64, aw in 0.0..0.6f64, ah in 0.0..0.6f64,
            bx in 0.0..1.0f64, by in 0.0..1.0f64, bw in 0.0..0.6f64, bh in 0.0..0.6f64,
        ) {
            let a = BBox::new(ax, ay, aw, ah);
            let b = BBox::new(bx, by, bw, bh);
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn enclosing_union_contains_inputs_and_is_tight(
            boxes in proptest::collection::vec(
                (0.1..0.9f64, 0.1..0.9f64, 0.01..0.3f64, 0.01..0.3f64), 1..6)
        ) {
            let boxes: Vec<BBox> = boxes.into_iter()
                .map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h)).collect();
            let u = enclosing_union(boxes.iter()).unwrap();
            let mut x0 = f64::INFINITY;
            let mut y0 = f64::INFINITY;
            let mut x1 = f64::NEG_INFINITY;
            let mut y1 = f64::NEG_INFINITY;
            for b in &boxes {
                prop_assert!(u.contains(b, 1e-12));
                let e = b.extent();
                x0 = x0.min(e.0); y0 = y0.min(e.1); x1 = x1.max(e.2); y1 = y1.max(e.3);
            }
            let ue = u.extent();
            prop_assert!((ue.0 - x0).abs() < 1e-12 && (ue.3 - y1).abs() < 1e-12);
            prop_assert!((ue.1 - y0).abs() < 1e-12 && (ue.2 - x1).abs() < 1e-12);
            // Idempotence: union of the union is itself.
            let uu = enclosing_union([u].iter()).unwrap();
            prop_assert!((uu.cx - u.cx).abs() < 1e-15 && (uu.w - u.w).abs() < 1e-15);
        }

        #[test]
        fn encode_decode_roundtrip(
            cx in 0.0..1.0f64, cy in 0.0..1.0f64, w in 0.0..0.5f64, h in 0.0..0.5f64,
            row in 0usize..8, col in 0usize..8,
        ) {
            let grid = GridSpec::square(8).unwrap();
            let cell = CellIndex { row, col };
            let b = BBox::new(cx, cy, w, h);
            let back = decode_cell_relative(encode_cell_relative(&b, cell, grid), cell, grid);
            prop_assert!((back.cx - b.cx).abs() < 1e-12);
            prop_assert!((back.cy - b.cy).abs() < 1e-12);
            prop_assert!((back.w - b.w).abs() < 1e-12);
            prop_assert!((back.h - b.h).abs() < 1e-12);
        }
    }
}
