//! The multi-stage detection cascade.
//!
//! A pipeline is a list of stages. Every stage runs a detector over one or
//! more regions of the original image — the whole image for stage 1, the
//! crops selected by the previous transition afterwards — always resampled
//! to the stage's own input resolution. Intermediate stages split their
//! cells into early exits (finished detections) and refinement candidates;
//! candidates from all of a stage's regions are pooled, suppressed and
//! capped together, so the per-stage crop limit holds per image rather than
//! per region. The last stage has no transition: every positive-confidence
//! cell becomes a detection.
//!
//! All bookkeeping is done in original-image unit coordinates. Detector
//! outputs are region-local and mapped back through the region frame;
//! because offsets rescale width and height multiplicatively, mapping and
//! rescaling commute and crops can be suppressed across regions in a single
//! pool.
//!
//! Cost accounting: each region evaluated at resolution `R` with an
//! `I × J` grid contributes `I·J` boxes and `R²` pixels, whether or not the
//! detector actually reads pixels. Budgets are the worst case, reached when
//! every transition fills its crop quota.

use serde::{Deserialize, Serialize};

use crate::boxgeom::{resolution_to_grid, BBox, GridSpec};
use crate::grouping::GroundTruthScene;
use crate::losses::StageOutput;
use crate::synthdata::GrayImage;
use crate::transition::{
    crops_from_candidates, map_to_parent, nms, split_decisions, GroupPolicy, OffsetPolicy,
    RefineCandidate, ScoredDetection, TransitionConfig,
};
use crate::{Error, Result};

/// What a detector sees for one region of one image.
#[derive(Debug, Clone)]
pub struct RegionSample<'a> {
    pub image_id: &'a str,
    /// The evaluated region in original-image unit coordinates.
    pub region: BBox,
    /// The region resampled to the stage resolution; `None` when the
    /// detector reports it does not want pixels.
    pub pixels: Option<GrayImage>,
    /// Full-image ground truth, available to oracle detectors.
    pub scene: Option<&'a GroundTruthScene>,
}

/// A per-stage detector: maps a region sample to one prediction per grid
/// cell. The output grid must match the stage resolution (side / 32).
pub trait Detector {
    fn detect(&self, sample: &RegionSample<'_>) -> Result<StageOutput>;

    /// Whether [`RegionSample::pixels`] should be populated. Oracles answer
    /// from ground truth and skip the resampling work.
    fn wants_pixels(&self) -> bool {
        true
    }
}

impl<T: Detector + ?Sized> Detector for &T {
    fn detect(&self, sample: &RegionSample<'_>) -> Result<StageOutput> {
        (**self).detect(sample)
    }
    fn wants_pixels(&self) -> bool {
        (**self).wants_pixels()
    }
}

impl<T: Detector + ?Sized> Detector for Box<T> {
    fn detect(&self, sample: &RegionSample<'_>) -> Result<StageOutput> {
        (**self).detect(sample)
    }
    fn wants_pixels(&self) -> bool {
        (**self).wants_pixels()
    }
}

/// One image to run the cascade on. Pixels are required only when some
/// stage's detector wants them; ground truth only for oracle detectors.
#[derive(Debug, Clone, Copy)]
pub struct SceneInput<'a> {
    pub image_id: &'a str,
    pub image: Option<&'a GrayImage>,
    pub scene: Option<&'a GroundTruthScene>,
}

/// Pair scenes with their images for pipeline consumption.
pub fn scene_inputs<'a>(
    scenes: &'a [GroundTruthScene],
    images: Option<&'a [GrayImage]>,
) -> Vec<SceneInput<'a>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| SceneInput {
            image_id: &s.image_id,
            image: images.map(|imgs| &imgs[i]),
            scene: Some(s),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub resolution_px: u32,
    /// How this stage hands off to the next; `None` marks the final stage.
    pub transition: Option<TransitionConfig>,
}

/// Feature ablations, applied uniformly to every transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Ablation {
    /// Predicted group flags and predicted offsets.
    Full,
    /// Group flags ignored: every confident cell exits early, groups are
    /// never expanded.
    NoGroups,
    /// Offsets replaced by a constant rescaling factor.
    FixedOffsets { factor: f64 },
    /// No rescaling at all: crops are the raw suppression survivors.
    NoOffsets,
}

impl Ablation {
    pub fn group_policy(&self) -> GroupPolicy {
        match self {
            Ablation::NoGroups => GroupPolicy::Ignored,
            _ => GroupPolicy::Predicted,
        }
    }

    pub fn offset_policy(&self) -> OffsetPolicy {
        match self {
            Ablation::FixedOffsets { factor } => OffsetPolicy::Fixed(*factor),
            Ablation::NoOffsets => OffsetPolicy::Disabled,
            _ => OffsetPolicy::Predicted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub stages: Vec<StageConfig>,
    pub ablation: Ablation,
    /// Suppression threshold applied once to the pooled detections of the
    /// whole cascade; `None` keeps duplicates from overlapping regions.
    pub final_nms: Option<f64>,
}

impl PipelineConfig {
    /// A cascade given only per-stage resolutions; every transition gets the
    /// same configuration.
    pub fn with_resolutions(resolutions: &[u32], transition: TransitionConfig) -> Result<Self> {
        if resolutions.is_empty() {
            return Err(Error::Config("a pipeline needs at least one stage".into()));
        }
        let last = resolutions.len() - 1;
        let stages = resolutions
            .iter()
            .enumerate()
            .map(|(i, &r)| StageConfig {
                resolution_px: r,
                transition: (i < last).then_some(transition),
            })
            .collect();
        let cfg = PipelineConfig { stages, ablation: Ablation::Full, final_nms: Some(0.5) };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn single_stage(resolution_px: u32) -> Result<Self> {
        let cfg = PipelineConfig {
            stages: vec![StageConfig { resolution_px, transition: None }],
            ablation: Ablation::Full,
            final_nms: Some(0.5),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("a pipeline needs at least one stage".into()));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            resolution_to_grid(stage.resolution_px)?;
            let is_last = i + 1 == self.stages.len();
            match (&stage.transition, is_last) {
                (None, false) => {
                    return Err(Error::Config(format!(
                        "stage {} is intermediate and needs a transition",
                        i + 1
                    )))
                }
                (Some(_), true) => {
                    return Err(Error::Config("the final stage must not have a transition".into()))
                }
                (Some(t), false) => t.validate()?,
                (None, true) => {}
            }
        }
        if let Some(tau) = self.final_nms {
            if !(0.0..=1.0).contains(&tau) || !tau.is_finite() {
                return Err(Error::Config(format!("final_nms must be in [0,1], got {tau}")));
            }
        }
        if let Ablation::FixedOffsets { factor } = self.ablation {
            if !(factor > 0.0) || !factor.is_finite() {
                return Err(Error::Config(format!(
                    "fixed offset factor must be positive, got {factor}"
                )));
            }
        }
        Ok(())
    }

    pub fn grids(&self) -> Result<Vec<GridSpec>> {
        self.stages.iter().map(|s| resolution_to_grid(s.resolution_px)).collect()
    }

    /// Worst-case number of boxes predicted per image: the full grid for
    /// stage 1, then each stage's grid once per crop its predecessor may
    /// emit.
    pub fn box_budget(&self) -> Result<u64> {
        let mut total = 0u64;
        let mut regions = 1u64;
        for stage in &self.stages {
            let cells = resolution_to_grid(stage.resolution_px)?.cell_count() as u64;
            total += regions * cells;
            regions = stage.transition.map_or(regions, |t| t.gamma as u64);
        }
        Ok(total)
    }

    /// Worst-case number of pixels processed per image, counting each
    /// region at its stage's input resolution.
    pub fn pixel_budget(&self) -> Result<u64> {
        let mut total = 0u64;
        let mut regions = 1u64;
        for stage in &self.stages {
            total += regions * (stage.resolution_px as u64).pow(2);
            regions = stage.transition.map_or(regions, |t| t.gamma as u64);
        }
        Ok(total)
    }
}

/// What one stage did for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageSummary {
    pub stage: usize,
    pub regions: usize,
    pub crops: usize,
    pub early_exits: usize,
    pub boxes_evaluated: u64,
    pub pixels_processed: u64,
}

/// Per-image cost next to the configuration's worst case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub boxes_evaluated: u64,
    pub pixels_processed: u64,
    pub box_budget: u64,
    pub pixel_budget: u64,
}

impl CostReport {
    pub fn within_budget(&self) -> bool {
        self.boxes_evaluated <= self.box_budget && self.pixels_processed <= self.pixel_budget
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    /// Final detections in original-image coordinates, confidence-descending.
    pub detections: Vec<ScoredDetection>,
    pub cost: CostReport,
    pub stages: Vec<StageSummary>,
}

/// Run the cascade over one image. `detectors` must supply one detector per
/// configured stage, and each output grid must match its stage resolution.
pub fn run<D: Detector>(
    cfg: &PipelineConfig,
    detectors: &[D],
    input: &SceneInput<'_>,
) -> Result<PipelineRun> {
    cfg.validate()?;
    if detectors.len() != cfg.stages.len() {
        return Err(Error::Config(format!(
            "pipeline has {} stages but {} detectors were supplied",
            cfg.stages.len(),
            detectors.len()
        )));
    }

    let group_policy = cfg.ablation.group_policy();
    let offset_policy = cfg.ablation.offset_policy();
    let mut regions = vec![BBox::new(0.5, 0.5, 1.0, 1.0)];
    let mut detections: Vec<ScoredDetection> = Vec::new();
    let mut summaries = Vec::with_capacity(cfg.stages.len());
    let (mut boxes_total, mut pixels_total) = (0u64, 0u64);

    for (idx, (stage, detector)) in cfg.stages.iter().zip(detectors).enumerate() {
        let stage_no = idx + 1;
        let grid = resolution_to_grid(stage.resolution_px)?;
        let mut pooled: Vec<RefineCandidate> = Vec::new();
        let mut stage_exits = 0usize;
        let (mut boxes, mut pixels) = (0u64, 0u64);

        for region in &regions {
            let sampled = if detector.wants_pixels() {
                let image = input.image.ok_or_else(|| {
                    Error::Config(format!(
                        "stage {stage_no} detector needs pixels but the input has no image"
                    ))
                })?;
                Some(image.sample_region(region, stage.resolution_px))
            } else {
                None
            };
            let sample = RegionSample {
                image_id: input.image_id,
                region: *region,
                pixels: sampled,
                scene: input.scene,
            };
            let out = detector.detect(&sample)?;
            if out.grid != grid {
                return Err(Error::GridContract { expected: grid, got: out.grid });
            }
            boxes += grid.cell_count() as u64;
            pixels += (stage.resolution_px as u64).pow(2);

            match &stage.transition {
                Some(t) => {
                    let (exits, candidates) =
                        split_decisions(&out, t, stage_no, group_policy, offset_policy);
                    stage_exits += exits.len();
                    for e in exits {
                        detections.push(ScoredDetection {
                            bbox: map_to_parent(&e.bbox, region)?,
                            ..e
                        });
                    }
                    for c in candidates {
                        pooled.push(RefineCandidate { bbox: map_to_parent(&c.bbox, region)?, ..c });
                    }
                }
                None => {
                    for pred in &out.cells {
                        if pred.confidence <= 0.0 {
                            continue;
                        }
                        let clipped = pred.bbox.clip_to_unit();
                        if clipped.w <= 0.0 || clipped.h <= 0.0 {
                            continue;
                        }
                        detections.push(ScoredDetection {
                            bbox: map_to_parent(&clipped, region)?,
                            confidence: pred.confidence,
                            stage: stage_no,
                        });
                    }
                }
            }
        }

        let crops = match &stage.transition {
            Some(t) => crops_from_candidates(&pooled, t.tau_nms, t.gamma),
            None => Vec::new(),
        };
        summaries.push(StageSummary {
            stage: stage_no,
            regions: regions.len(),
            crops: crops.len(),
            early_exits: stage_exits,
            boxes_evaluated: boxes,
            pixels_processed: pixels,
        });
        boxes_total += boxes;
        pixels_total += pixels;
        regions = crops.into_iter().map(|c| c.region).collect();
    }

    if let Some(tau) = cfg.final_nms {
        let ranked: Vec<(BBox, f64)> = detections.iter().map(|d| (d.bbox, d.confidence)).collect();
        detections = nms(&ranked, tau, usize::MAX).into_iter().map(|i| detections[i]).collect();
    } else {
        detections.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    }

    Ok(PipelineRun {
        detections,
        cost: CostReport {
            boxes_evaluated: boxes_total,
            pixels_processed: pixels_total,
            box_budget: cfg.box_budget()?,
            pixel_budget: cfg.pixel_budget()?,
        },
        stages: summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxgeom::iou;
    use crate::grouping::DEFAULT_MARGIN;
    use crate::losses::{CellPrediction, StageOutput};
    use crate::synthdata::{
        perfect_stage_output, render_scene, OracleConfig, OracleDetector, OracleKind,
    };

    fn cascade(resolutions: &[u32], t: TransitionConfig) -> PipelineConfig {
        PipelineConfig::with_resolutions(resolutions, t).unwrap()
    }

    fn perfect_stages(resolutions: &[u32]) -> Vec<OracleDetector> {
        OracleDetector::stages(OracleConfig::new(OracleKind::Perfect, 0), resolutions)
    }

    #[test]
    fn budgets_match_hand_computed_values() {
        let t3 = TransitionConfig::new(0.1, 0.9, 0.5, 3).unwrap();
        let t6 = TransitionConfig::new(0.1, 0.9, 0.5, 6).unwrap();

        let c = cascade(&[512, 256], t3);
        assert_eq!(c.box_budget().unwrap(), 448);
        assert_eq!(c.pixel_budget().unwrap(), 458_752);

        let c = cascade(&[512, 64], t3);
        assert_eq!(c.box_budget().unwrap(), 268);

        let c = cascade(&[512, 256], t6);
        assert_eq!(c.box_budget().unwrap(), 640);
        assert_eq!(c.pixel_budget().unwrap(), 655_360);

        let c = cascade(&[256, 128], t6);
        assert_eq!(c.box_budget().unwrap(), 160);
        assert_eq!(c.pixel_budget().unwrap(), 163_840);

        let c = PipelineConfig::single_stage(1024).unwrap();
        assert_eq!(c.box_budget().unwrap(), 1024);
        assert_eq!(c.pixel_budget().unwrap(), 1_048_576);
    }

    #[test]
    fn three_stage_budget_uses_the_preceding_gamma() {
        let t = TransitionConfig::new(0.1, 0.9, 0.5, 2).unwrap();
        let c = cascade(&[512, 256, 64], t);
        // 16² + 2·8² + 2·2² = 256 + 128 + 8
        assert_eq!(c.box_budget().unwrap(), 392);
        assert_eq!(c.pixel_budget().unwrap(), 512 * 512 + 2 * 256 * 256 + 2 * 64 * 64);
    }

    #[test]
    fn config_validation_rejects_malformed_cascades() {
        let t = TransitionConfig::new(0.1, 0.9, 0.5, 3).unwrap();
        assert!(PipelineConfig {
            stages: vec![],
            ablation: Ablation::Full,
            final_nms: None
        }
        .validate()
        .is_err());
        // Transition on the last stage.
        assert!(PipelineConfig {
            stages: vec![StageConfig { resolution_px: 256, transition: Some(t) }],
            ablation: Ablation::Full,
            final_nms: None
        }
        .validate()
        .is_err());
        // Missing transition in the middle.
        assert!(PipelineConfig {
            stages: vec![
                StageConfig { resolution_px: 512, transition: None },
                StageConfig { resolution_px: 256, transition: None },
            ],
            ablation: Ablation::Full,
            final_nms: None
        }
        .validate()
        .is_err());
        // Resolution not divisible by the grid unit.
        assert!(PipelineConfig::single_stage(100).is_err());
        // Degenerate fixed offset.
        let mut c = PipelineConfig::single_stage(256).unwrap();
        c.ablation = Ablation::FixedOffsets { factor: 0.0 };
        assert!(c.validate().is_err());
    }

    #[test]
    fn detector_count_must_match_stage_count() {
        let cfg = PipelineConfig::single_stage(256).unwrap();
        let scene = GroundTruthScene::new("m", 256, vec![BBox::new(0.5, 0.5, 0.1, 0.1)]);
        let dets = perfect_stages(&[256, 128]);
        let input = SceneInput { image_id: "m", image: None, scene: Some(&scene) };
        assert!(matches!(run(&cfg, &dets, &input), Err(Error::Config(_))));
    }

    #[test]
    fn single_stage_perfect_oracle_recovers_the_scene() {
        let scene = GroundTruthScene::new(
            "s",
            256,
            vec![BBox::new(0.2, 0.2, 0.06, 0.05), BBox::new(0.7, 0.6, 0.08, 0.09)],
        );
        let cfg = PipelineConfig::single_stage(256).unwrap();
        let dets = perfect_stages(&[256]);
        let input = SceneInput { image_id: "s", image: None, scene: Some(&scene) };
        let out = run(&cfg, &dets, &input).unwrap();
        assert_eq!(out.detections.len(), 2);
        for gt in &scene.boxes {
            assert!(out.detections.iter().any(|d| iou(&d.bbox, gt) > 0.999));
        }
        assert_eq!(out.cost.boxes_evaluated, 64);
        assert_eq!(out.cost.pixels_processed, 65_536);
        assert!(out.cost.within_budget());
    }

    #[test]
    fn two_stage_perfect_oracle_exits_singletons_and_refines_groups() {
        // An isolated object far from a tight pair. Both pair members sit
        // strictly inside stage-1 cell (9,9) of the 16×16 grid — the cell
        // spans [0.5625, 0.625)² — so they form one group cell that must be
        // expanded by stage 2.
        let pair_a = BBox::new(0.59, 0.59, 0.015, 0.015);
        let pair_b = BBox::new(0.6125, 0.6125, 0.015, 0.015);
        let single = BBox::new(0.15, 0.20, 0.05, 0.05);
        let scene = GroundTruthScene::new("t", 512, vec![single, pair_a, pair_b]);

        let t = TransitionConfig::new(0.1, 0.9, 0.5, 3).unwrap();
        let cfg = cascade(&[512, 256], t);
        let dets = perfect_stages(&[512, 256]);
        let input = SceneInput { image_id: "t", image: None, scene: Some(&scene) };
        let out = run(&cfg, &dets, &input).unwrap();

        // The singleton leaves at stage 1 with its exact box.
        let exits: Vec<_> = out.detections.iter().filter(|d| d.stage == 1).collect();
        assert!(exits.iter().any(|d| iou(&d.bbox, &single) > 0.999));
        // Both pair members are found by stage 2.
        for gt in [&pair_a, &pair_b] {
            assert!(
                out.detections.iter().any(|d| d.stage == 2 && iou(&d.bbox, gt) > 0.99),
                "pair member not refined: {gt:?}"
            );
        }
        assert_eq!(out.detections.len(), 3);
        assert!(out.cost.within_budget());
        assert!(out.stages[0].crops <= 3);
    }

    #[test]
    fn crop_quota_is_shared_across_regions_not_per_region() {
        // Five separated pairs, each confined to its own stage-1 cell:
        // stage 1 yields five refinement candidates, but gamma = 2 caps the
        // crops pooled across the whole image.
        let mut boxes = Vec::new();
        for i in 0..5 {
            // Centers of cells (4, 1), (4, 4), … on the 16×16 grid.
            let cx = (1.5 + 3.0 * i as f64) / 16.0;
            let cy = 4.5 / 16.0;
            boxes.push(BBox::new(cx - 0.008, cy - 0.008, 0.012, 0.012));
            boxes.push(BBox::new(cx + 0.008, cy + 0.008, 0.012, 0.012));
        }
        let scene = GroundTruthScene::new("q", 512, boxes);
        let t = TransitionConfig::new(0.1, 0.9, 0.5, 2).unwrap();
        let cfg = cascade(&[512, 256], t);
        let dets = perfect_stages(&[512, 256]);
        let input = SceneInput { image_id: "q", image: None, scene: Some(&scene) };
        let out = run(&cfg, &dets, &input).unwrap();
        assert_eq!(out.stages[0].crops, 2);
        assert_eq!(out.stages[1].regions, 2);
        assert!(out.cost.boxes_evaluated <= out.cost.box_budget);
    }

    struct WrongGrid;
    impl Detector for WrongGrid {
        fn detect(&self, _s: &RegionSample<'_>) -> Result<StageOutput> {
            StageOutput::new(
                GridSpec::square(4).unwrap(),
                vec![CellPrediction::inert(); 16],
            )
        }
        fn wants_pixels(&self) -> bool {
            false
        }
    }

    #[test]
    fn mismatched_detector_grid_is_an_error() {
        let cfg = PipelineConfig::single_stage(256).unwrap(); // expects 8×8
        let input = SceneInput { image_id: "g", image: None, scene: None };
        match run(&cfg, &[WrongGrid], &input) {
            Err(Error::GridContract { expected, got }) => {
                assert_eq!(expected.rows, 8);
                assert_eq!(got.rows, 4);
            }
            other => panic!("expected grid contract violation, got {other:?}"),
        }
    }

    struct RecordingDetector;
    impl Detector for RecordingDetector {
        fn detect(&self, sample: &RegionSample<'_>) -> Result<StageOutput> {
            let px = sample.pixels.as_ref().expect("pixels requested");
            assert_eq!((px.width, px.height), (64, 64));
            Ok(StageOutput::inert(GridSpec::square(2).unwrap()))
        }
    }

    #[test]
    fn pixel_detectors_receive_region_resamples() {
        let scene = GroundTruthScene::new("p", 128, vec![BBox::new(0.5, 0.5, 0.2, 0.2)]);
        let image = render_scene(&scene, 1);
        let cfg = PipelineConfig::single_stage(64).unwrap();
        let input = SceneInput { image_id: "p", image: Some(&image), scene: None };
        let out = run(&cfg, &[RecordingDetector], &input).unwrap();
        assert_eq!(out.cost.pixels_processed, 64 * 64);
        // And without an image the same pipeline is a configuration error.
        let bare = SceneInput { image_id: "p", image: None, scene: None };
        assert!(matches!(run(&cfg, &[RecordingDetector], &bare), Err(Error::Config(_))));
    }

    struct EchoOnce {
        bbox: BBox,
    }
    impl Detector for EchoOnce {
        fn detect(&self, _s: &RegionSample<'_>) -> Result<StageOutput> {
            let grid = GridSpec::square(2).unwrap();
            let mut cells = vec![CellPrediction::inert(); 4];
            cells[0] = CellPrediction { bbox: self.bbox, confidence: 0.9, ..CellPrediction::inert() };
            cells[3] = CellPrediction { bbox: self.bbox, confidence: 0.8, ..CellPrediction::inert() };
            StageOutput::new(grid, cells)
        }
        fn wants_pixels(&self) -> bool {
            false
        }
    }

    #[test]
    fn final_suppression_merges_duplicates_across_cells() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        let mut cfg = PipelineConfig::single_stage(64).unwrap();
        let input = SceneInput { image_id: "d", image: None, scene: None };

        cfg.final_nms = Some(0.5);
        let deduped = run(&cfg, &[EchoOnce { bbox: b }], &input).unwrap();
        assert_eq!(deduped.detections.len(), 1);
        assert_eq!(deduped.detections[0].confidence, 0.9);

        cfg.final_nms = None;
        let kept = run(&cfg, &[EchoOnce { bbox: b }], &input).unwrap();
        assert_eq!(kept.detections.len(), 2);
        assert!(kept.detections[0].confidence >= kept.detections[1].confidence);
    }

    #[test]
    fn detections_from_crops_return_in_image_coordinates() {
        // A pair confined to one stage-1 cell: stage-2 detections must come
        // back near the original boxes, not in crop-local coordinates.
        let a = BBox::new(0.505, 0.50, 0.02, 0.02);
        let b = BBox::new(0.54, 0.53, 0.02, 0.02);
        let scene = GroundTruthScene::new("c", 512, vec![a, b]);
        let t = TransitionConfig::new(0.1, 0.9, 0.5, 3).unwrap();
        let cfg = cascade(&[512, 256], t);
        let dets = perfect_stages(&[512, 256]);
        let input = SceneInput { image_id: "c", image: None, scene: Some(&scene) };
        let out = run(&cfg, &dets, &input).unwrap();
        for gt in [&a, &b] {
            assert!(out.detections.iter().any(|d| iou(&d.bbox, gt) > 0.99));
        }
    }

    #[test]
    fn no_groups_ablation_never_refines() {
        // Both members strictly inside one stage-1 cell, so the only
        // occupied cell is a group cell.
        let a = BBox::new(0.58, 0.58, 0.015, 0.015);
        let b = BBox::new(0.61, 0.61, 0.015, 0.015);
        let scene = GroundTruthScene::new("n", 512, vec![a, b]);
        let t = TransitionConfig::new(0.1, 0.9, 0.5, 3).unwrap();
        let mut cfg = cascade(&[512, 256], t);
        cfg.ablation = Ablation::NoGroups;
        let dets = perfect_stages(&[512, 256]);
        let input = SceneInput { image_id: "n", image: None, scene: Some(&scene) };
        let out = run(&cfg, &dets, &input).unwrap();
        // The pair's union exits at stage 1; nothing reaches stage 2.
        assert_eq!(out.stages[0].crops, 0);
        assert!(out.detections.iter().all(|d| d.stage == 1));
        // The union box covers neither member at IoU ≥ 0.5.
        for gt in [&a, &b] {
            assert!(out.detections.iter().all(|d| iou(&d.bbox, gt) < 0.5));
        }
    }

    #[test]
    fn empty_scene_runs_cleanly_and_cheaply() {
        let scene = GroundTruthScene::new("e", 512, vec![]);
        let t = TransitionConfig::new(0.1, 0.9, 0.5, 3).unwrap();
        let cfg = cascade(&[512, 256], t);
        let dets = perfect_stages(&[512, 256]);
        let input = SceneInput { image_id: "e", image: None, scene: Some(&scene) };
        let out = run(&cfg, &dets, &input).unwrap();
        assert!(out.detections.is_empty());
        assert_eq!(out.stages[1].regions, 0);
        assert_eq!(out.cost.boxes_evaluated, 256);
    }

    #[test]
    fn mixed_detector_lists_work_through_trait_objects() {
        let scene = GroundTruthScene::new("x", 512, vec![BBox::new(0.3, 0.3, 0.05, 0.05)]);
        let t = TransitionConfig::new(0.1, 0.9, 0.5, 3).unwrap();
        let cfg = cascade(&[512, 256], t);
        let s1 = OracleDetector::new(OracleConfig::new(OracleKind::Perfect, 0), 512);
        let s2 = OracleDetector::new(OracleConfig::new(OracleKind::Perfect, 0), 256);
        let dyns: Vec<&dyn Detector> = vec![&s1, &s2];
        let input = SceneInput { image_id: "x", image: None, scene: Some(&scene) };
        let out = run(&cfg, &dyns, &input).unwrap();
        assert_eq!(out.detections.len(), 1);
    }

    #[test]
    fn perfect_cells_match_targets_when_region_is_the_whole_image() {
        // Guards the coordinate convention: with the unit region, oracle
        // outputs equal whole-scene targets.
        let scene = GroundTruthScene::new(
            "w",
            256,
            vec![BBox::new(0.31, 0.44, 0.07, 0.05), BBox::new(0.8, 0.2, 0.04, 0.06)],
        );
        let det = OracleDetector::new(OracleConfig::new(OracleKind::Perfect, 0), 256);
        let sample = RegionSample {
            image_id: "w",
            region: BBox::new(0.5, 0.5, 1.0, 1.0),
            pixels: None,
            scene: Some(&scene),
        };
        let via_detector = det.detect(&sample).unwrap();
        let direct =
            perfect_stage_output(&scene, GridSpec::square(8).unwrap(), DEFAULT_MARGIN);
        for (a, b) in via_detector.cells.iter().zip(&direct.cells) {
            assert_eq!(a.confidence, b.confidence);
            assert!((a.bbox.cx - b.bbox.cx).abs() < 1e-12);
            assert!((a.bbox.w - b.bbox.w).abs() < 1e-12);
        }
    }
}
