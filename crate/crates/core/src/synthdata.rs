//! Synthetic scenes, a tiny grayscale image format, and oracle detectors.
//!
//! Scenes place bright rectangles on a textured mid-gray background so that
//! resolution-dependent detection is meaningful: a small object blurs into
//! the texture when the image is sampled coarsely, while the enclosing box
//! of a cluster stays visible. Generation is seeded and parallel over
//! scenes, with the per-scene stream derived as `seed XOR scene index`.
//!
//! Oracles turn ground truth into stage outputs and stand in for trained
//! detectors when exercising transitions, pipelines and metrics:
//! - perfect: emits exactly the per-cell targets;
//! - noisy: perfect plus coordinate jitter, dropped cells, spurious
//!   low-confidence boxes;
//! - resolution-degraded: a cell fires only if its object - or, for group
//!   cells, the union box - covers enough rendered pixels at the stage's
//!   input resolution.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxgeom::{resolution_to_grid, BBox, GridSpec};
use crate::grouping::{self, GroundTruthScene, TargetGrid, DEFAULT_MARGIN};
use crate::losses::{offset_logit, CellPrediction, StageOutput, BIG_LOGIT};
use crate::pipeline::{Detector, RegionSample};
use crate::{Error, Result};

pub const IMAGE_MAGIC: &str = "ODGI-IMG v1";

/// Single-channel 8-bit image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != (width as usize) * (height as usize) {
            return Err(Error::Format(format!(
                "pixel buffer has {} bytes, expected {}",
                pixels.len(),
                width as usize * height as usize
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        GrayImage { width, height, pixels: vec![value; width as usize * height as usize] }
    }

    fn at(&self, x: i64, y: i64) -> f64 {
        let x = x.clamp(0, self.width as i64 - 1) as usize;
        let y = y.clamp(0, self.height as i64 - 1) as usize;
        self.pixels[y * self.width as usize + x] as f64
    }

    /// Bilinear sample at unit coordinates, edge-clamped.
    pub fn sample_bilinear(&self, ux: f64, uy: f64) -> f64 {
        let px = ux * self.width as f64 - 0.5;
        let py = uy * self.height as f64 - 0.5;
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let v00 = self.at(x0, y0);
        let v10 = self.at(x0 + 1, y0);
        let v01 = self.at(x0, y0 + 1);
        let v11 = self.at(x0 + 1, y0 + 1);
        v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy
    }

    /// Resample a region of this image to a `size × size` view.
    pub fn sample_region(&self, region: &BBox, size: u32) -> GrayImage {
        let (x0, y0, _, _) = region.extent();
        let mut pixels = Vec::with_capacity(size as usize * size as usize);
        for oy in 0..size {
            let uy = y0 + (oy as f64 + 0.5) / size as f64 * region.h;
            for ox in 0..size {
                let ux = x0 + (ox as f64 + 0.5) / size as f64 * region.w;
                pixels.push((self.sample_bilinear(ux, uy) + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
        GrayImage { width: size, height: size, pixels }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "{IMAGE_MAGIC}\n{} {}\n", self.width, self.height)?;
        w.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut magic = String::new();
        reader.read_line(&mut magic)?;
        if magic.trim_end_matches('\n') != IMAGE_MAGIC {
            return Err(Error::Format(format!("bad image magic {magic:?}")));
        }
        let mut dims = String::new();
        reader.read_line(&mut dims)?;
        let mut parts = dims.split_whitespace();
        let parse = |s: Option<&str>| -> Result<u32> {
            s.ok_or_else(|| Error::Format("missing image dimensions".into()))?
                .parse()
                .map_err(|e| Error::Format(format!("bad image dimensions: {e}")))
        };
        let width = parse(parts.next())?;
        let height = parse(parts.next())?;
        let mut pixels = vec![0u8; width as usize * height as usize];
        reader.read_exact(&mut pixels)?;
        GrayImage::new(width, height, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)
    }

    pub fn load(path: &Path) -> Result<Self> {
        GrayImage::read_from(&mut std::fs::File::open(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Clustering {
    None,
    /// Objects gather around `clusters` uniform cluster centers with a
    /// per-axis Gaussian spread, capped at twice the spread.
    Clustered { clusters: usize, spread: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenConfig {
    pub seed: u64,
    /// Poisson mean of the number of objects per scene.
    pub mean_objects: f64,
    /// Mean box area as a fraction of the image; sizes are drawn uniformly
    /// in ±50% of this mean.
    pub mean_area_fraction: f64,
    pub clustering: Clustering,
    pub image_size_px: u32,
    /// Minimum center-to-center distance between boxes (0 disables the
    /// constraint). Enforced by rejection; objects that cannot be placed
    /// are skipped.
    pub min_separation: f64,
    /// Largest number of objects a single cluster may receive (0 = no cap).
    pub max_cluster_size: usize,
    /// Minimum distance between cluster centers (0 disables).
    pub cluster_min_distance: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            seed: 0,
            mean_objects: 3.0,
            mean_area_fraction: 0.00113,
            clustering: Clustering::None,
            image_size_px: 512,
            min_separation: 0.0,
            max_cluster_size: 0,
            cluster_min_distance: 0.0,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_objects >= 0.0) || !self.mean_objects.is_finite() {
            return Err(Error::Config("mean_objects must be finite and non-negative".into()));
        }
        if !(self.mean_area_fraction > 0.0 && self.mean_area_fraction < 1.0) {
            return Err(Error::Config(format!(
                "mean_area_fraction must be in (0, 1), got {}",
                self.mean_area_fraction
            )));
        }
        if self.image_size_px == 0 {
            return Err(Error::Config("image_size_px must be positive".into()));
        }
        if let Clustering::Clustered { clusters, spread } = self.clustering {
            if clusters == 0 || !(spread > 0.0) {
                return Err(Error::Config("clustered mode needs clusters >= 1 and spread > 0".into()));
            }
        }
        Ok(())
    }
}

fn far_enough(p: (f64, f64), others: &[(f64, f64)], min_dist: f64) -> bool {
    min_dist <= 0.0
        || others
            .iter()
            .all(|o| ((p.0 - o.0).powi(2) + (p.1 - o.1).powi(2)).sqrt() >= min_dist)
}

fn generate_one(cfg: &SceneGenConfig, index: usize) -> GroundTruthScene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index as u64);
    let n = if cfg.mean_objects > 0.0 {
        (Poisson::new(cfg.mean_objects).expect("validated").sample(&mut rng) as usize).min(10_000)
    } else {
        0
    };

    let mut cluster_centers: Vec<(f64, f64)> = Vec::new();
    let mut cluster_load: Vec<usize> = Vec::new();
    if let Clustering::Clustered { clusters, .. } = cfg.clustering {
        for _ in 0..clusters {
            for _ in 0..64 {
                let p = (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
                if far_enough(p, &cluster_centers, cfg.cluster_min_distance) {
                    cluster_centers.push(p);
                    cluster_load.push(0);
                    break;
                }
            }
        }
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut boxes: Vec<BBox> = Vec::with_capacity(n);
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(n);
    for _ in 0..n {
        let area = rng.gen_range(0.5 * cfg.mean_area_fraction..1.5 * cfg.mean_area_fraction);
        let aspect = rng.gen_range(0.75..4.0 / 3.0);
        let w = (area * aspect).sqrt().min(0.98);
        let h = (area / aspect).sqrt().min(0.98);

        let mut placed = false;
        'attempts: for _ in 0..64 {
            let center = match cfg.clustering {
                Clustering::None => (
                    rng.gen_range(0.5 * w..=1.0 - 0.5 * w),
                    rng.gen_range(0.5 * h..=1.0 - 0.5 * h),
                ),
                Clustering::Clustered { spread, .. } => {
                    let eligible: Vec<usize> = (0..cluster_centers.len())
                        .filter(|&c| cfg.max_cluster_size == 0 || cluster_load[c] < cfg.max_cluster_size)
                        .collect();
                    let c = if let Some(&c) = eligible.get(rng.gen_range(0..eligible.len().max(1))) {
                        c
                    } else {
                        // All clusters full: open a new center if spacing allows.
                        let mut spawned = None;
                        for _ in 0..64 {
                            let p = (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
                            if far_enough(p, &cluster_centers, cfg.cluster_min_distance) {
                                cluster_centers.push(p);
                                cluster_load.push(0);
                                spawned = Some(cluster_centers.len() - 1);
                                break;
                            }
                        }
                        match spawned {
                            Some(c) => c,
                            None => break 'attempts,
                        }
                    };
                    let cap = 2.0 * spread;
                    let jitter = |rng: &mut ChaCha8Rng| {
                        (normal.sample(rng) * spread).clamp(-cap, cap)
                    };
                    let p = (
                        (cluster_centers[c].0 + jitter(&mut rng)).clamp(0.5 * w, 1.0 - 0.5 * w),
                        (cluster_centers[c].1 + jitter(&mut rng)).clamp(0.5 * h, 1.0 - 0.5 * h),
                    );
                    if far_enough(p, &centers, cfg.min_separation) {
                        cluster_load[c] += 1;
                    }
                    p
                }
            };
            if far_enough(center, &centers, cfg.min_separation) {
                centers.push(center);
                boxes.push(BBox::new(center.0, center.1, w, h));
                placed = true;
                break;
            }
        }
        let _ = placed; // objects that cannot be separated are skipped
    }

    GroundTruthScene::new(format!("scene-{index:06}"), cfg.image_size_px, boxes)
}

/// Generate `count` scenes. Deterministic in `cfg.seed` and independent of
/// thread scheduling.
pub fn generate_scenes(cfg: &SceneGenConfig, count: usize) -> Result<Vec<GroundTruthScene>> {
    cfg.validate()?;
    Ok((0..count)
        .into_par_iter()
        .map(|i| generate_one(cfg, i))
        .collect())
}

/// Render a scene: textured background, one bright rectangle per box.
pub fn render_scene(scene: &GroundTruthScene, texture_seed: u64) -> GrayImage {
    let size = scene.image_size_px;
    let mut rng = ChaCha8Rng::seed_from_u64(texture_seed);
    let mut pixels = vec![0u8; size as usize * size as usize];
    for p in pixels.iter_mut() {
        *p = rng.gen_range(70..118);
    }
    let span = size as f64;
    for b in &scene.boxes {
        let value: u8 = rng.gen_range(190..=250);
        let Some((x0, y0, x1, y1)) = b.clipped_extent() else { continue };
        let px0 = ((x0 * span - 0.5).ceil().max(0.0)) as usize;
        let py0 = ((y0 * span - 0.5).ceil().max(0.0)) as usize;
        let px1 = ((x1 * span - 0.5).floor()).min(span - 1.0) as usize;
        let py1 = ((y1 * span - 0.5).floor()).min(span - 1.0) as usize;
        for y in py0..=py1.min(size as usize - 1) {
            for x in px0..=px1.min(size as usize - 1) {
                pixels[y * size as usize + x] = value;
            }
        }
    }
    GrayImage { width: size, height: size, pixels }
}

fn texture_seed_for(cfg_seed: u64, index: usize) -> u64 {
    (cfg_seed ^ index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x5851_F42D_4C95_7F2D)
}

/// Generate scenes together with their rendered images.
pub fn generate(cfg: &SceneGenConfig, count: usize) -> Result<Vec<(GroundTruthScene, GrayImage)>> {
    cfg.validate()?;
    Ok((0..count)
        .into_par_iter()
        .map(|i| {
            let scene = generate_one(cfg, i);
            let image = render_scene(&scene, texture_seed_for(cfg.seed, i));
            (scene, image)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

fn perfect_cell(target: &grouping::CellTarget, margin: f64) -> CellPrediction {
    let (ow, oh) = grouping::offset_targets(&target.target_box, &target.target_box, margin);
    CellPrediction {
        bbox: target.target_box,
        confidence: 1.0,
        group_logit: if target.group_flag { BIG_LOGIT } else { -BIG_LOGIT },
        offset_logits: (offset_logit(ow), offset_logit(oh)),
    }
}

/// The output a flawless detector would produce: per-cell targets with full
/// confidence on occupied cells and zero elsewhere.
pub fn perfect_stage_output(scene: &GroundTruthScene, grid: GridSpec, margin: f64) -> StageOutput {
    let targets = TargetGrid::from_scene(scene, grid);
    let cells = targets
        .cells
        .iter()
        .map(|t| if t.occupied { perfect_cell(t, margin) } else { CellPrediction::inert() })
        .collect();
    StageOutput::new(grid, cells).expect("cell count matches grid")
}

/// Perfect output degraded by Gaussian coordinate jitter, dropped cells and
/// spurious low-confidence boxes. Offsets are recomputed against the true
/// target from the jittered box, the way a trained offset head compensates
/// its own localization error.
pub fn noisy_stage_output(
    scene: &GroundTruthScene,
    grid: GridSpec,
    margin: f64,
    sigma_jitter: f64,
    p_drop: f64,
    p_spurious: f64,
    rng: &mut ChaCha8Rng,
) -> StageOutput {
    let targets = TargetGrid::from_scene(scene, grid);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let cells = targets
        .grid
        .cells()
        .map(|cell| {
            let t = targets.cell(cell);
            if t.occupied {
                if rng.gen::<f64>() < p_drop {
                    return CellPrediction::inert();
                }
                let b = &t.target_box;
                let jittered = BBox::new(
                    b.cx + sigma_jitter * normal.sample(rng),
                    b.cy + sigma_jitter * normal.sample(rng),
                    (b.w + sigma_jitter * normal.sample(rng)).max(1e-4),
                    (b.h + sigma_jitter * normal.sample(rng)).max(1e-4),
                );
                let (ow, oh) = grouping::offset_targets(&jittered, b, margin);
                CellPrediction {
                    bbox: jittered,
                    confidence: 1.0,
                    group_logit: if t.group_flag { BIG_LOGIT } else { -BIG_LOGIT },
                    offset_logits: (offset_logit(ow), offset_logit(oh)),
                }
            } else if p_spurious > 0.0 && rng.gen::<f64>() < p_spurious {
                let (x0, y0, x1, y1) = targets.grid.cell_bounds(cell);
                let bbox = BBox::new(
                    rng.gen_range(x0..x1),
                    rng.gen_range(y0..y1),
                    rng.gen_range(0.01..0.05),
                    rng.gen_range(0.01..0.05),
                );
                CellPrediction {
                    bbox,
                    confidence: rng.gen_range(0.05..0.5),
                    group_logit: if rng.gen::<bool>() { BIG_LOGIT } else { -BIG_LOGIT },
                    offset_logits: (
                        offset_logit(rng.gen_range(0.5..1.0)),
                        offset_logit(rng.gen_range(0.5..1.0)),
                    ),
                }
            } else {
                CellPrediction::inert()
            }
        })
        .collect();
    StageOutput::new(grid, cells).expect("cell count matches grid")
}

/// Perfect output filtered by rendered size: a cell fires only if the box it
/// would regress to (the union, for group cells) covers at least
/// `area_threshold_px` pixels when the stage input is sampled at
/// `resolution` pixels. Groups therefore survive resolutions at which their
/// individual members have disappeared.
pub fn degraded_stage_output(
    scene: &GroundTruthScene,
    grid: GridSpec,
    margin: f64,
    area_threshold_px: f64,
    resolution: u32,
) -> StageOutput {
    let targets = TargetGrid::from_scene(scene, grid);
    let px = (resolution as f64) * (resolution as f64);
    let cells = targets
        .cells
        .iter()
        .map(|t| {
            if t.occupied && t.target_box.area() * px >= area_threshold_px {
                perfect_cell(t, margin)
            } else {
                CellPrediction::inert()
            }
        })
        .collect();
    StageOutput::new(grid, cells).expect("cell count matches grid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleKind {
    Perfect,
    Noisy { sigma_jitter: f64, p_drop: f64, p_spurious: f64 },
    ResolutionDegraded { area_threshold_px: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub kind: OracleKind,
    pub seed: u64,
    /// Margin used when deriving offset targets.
    pub margin: f64,
}

impl OracleConfig {
    pub fn new(kind: OracleKind, seed: u64) -> Self {
        OracleConfig { kind, seed, margin: DEFAULT_MARGIN }
    }
}

/// A [`Detector`] that answers from ground truth restricted to the sampled
/// region. Requires scenes to be attached to the pipeline input; never looks
/// at pixels.
#[derive(Debug, Clone)]
pub struct OracleDetector {
    pub config: OracleConfig,
    pub resolution: u32,
}

impl OracleDetector {
    pub fn new(config: OracleConfig, resolution: u32) -> Self {
        OracleDetector { config, resolution }
    }

    /// One oracle per stage resolution, sharing a configuration.
    pub fn stages(config: OracleConfig, resolutions: &[u32]) -> Vec<OracleDetector> {
        resolutions.iter().map(|&r| OracleDetector::new(config, r)).collect()
    }
}

/// Stable hash mixing the oracle seed with the sampled region so noisy
/// oracle draws depend only on what is being looked at, not on call order.
fn region_stream(seed: u64, image_id: &str, region: &BBox) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for b in image_id.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3);
    }
    for v in [region.cx, region.cy, region.w, region.h] {
        h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl Detector for OracleDetector {
    fn wants_pixels(&self) -> bool {
        false
    }

    fn detect(&self, sample: &RegionSample<'_>) -> Result<StageOutput> {
        let scene = sample
            .scene
            .ok_or_else(|| Error::Config("oracle detector requires ground truth".into()))?;
        let local = grouping::restrict_to_region(scene, &sample.region, 0.0)?;
        let grid = resolution_to_grid(self.resolution)?;
        Ok(match self.config.kind {
            OracleKind::Perfect => perfect_stage_output(&local, grid, self.config.margin),
            OracleKind::Noisy { sigma_jitter, p_drop, p_spurious } => {
                let mut rng = ChaCha8Rng::seed_from_u64(region_stream(
                    self.config.seed,
                    sample.image_id,
                    &sample.region,
                ));
                noisy_stage_output(
                    &local,
                    grid,
                    self.config.margin,
                    sigma_jitter,
                    p_drop,
                    p_spurious,
                    &mut rng,
                )
            }
            OracleKind::ResolutionDegraded { area_threshold_px } => degraded_stage_output(
                &local,
                grid,
                self.config.margin,
                area_threshold_px,
                self.resolution,
            ),
        })
    }
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    image_id: String,
    boxes: Vec<BBox>,
}

/// Write `annotations.jsonl` (one `{image_id, boxes}` record per line) and,
/// when given, `images/<image_id>.img` renders.
pub fn write_dataset(
    dir: &Path,
    scenes: &[GroundTruthScene],
    images: Option<&[GrayImage]>,
) -> Result<()> {
    if let Some(images) = images {
        if images.len() != scenes.len() {
            return Err(Error::Config("one image per scene required".into()));
        }
    }
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(std::fs::File::create(dir.join("annotations.jsonl"))?);
    for s in scenes {
        let record =
            AnnotationRecord { image_id: s.image_id.clone(), boxes: s.boxes.clone() };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    if let Some(images) = images {
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir)?;
        for (s, img) in scenes.iter().zip(images) {
            img.save(&img_dir.join(format!("{}.img", s.image_id)))?;
        }
    }
    Ok(())
}

/// Read a dataset back. With `with_images`, each scene's image is loaded
/// and the scene's nominal size is taken from it.
pub fn read_dataset(dir: &Path, with_images: bool) -> Result<(Vec<GroundTruthScene>, Vec<GrayImage>)> {
    let file = std::fs::File::open(dir.join("annotations.jsonl"))?;
    let mut scenes = Vec::new();
    let mut images = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(&line)?;
        let mut scene = GroundTruthScene::new(record.image_id, 0, record.boxes);
        if with_images {
            let img = GrayImage::load(&dir.join("images").join(format!("{}.img", scene.image_id)))?;
            scene.image_size_px = img.width;
            images.push(img);
        }
        scenes.push(scene);
    }
    Ok((scenes, images))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxgeom::CellIndex;
    use crate::losses::{coords_loss, LossWeights};
    use crate::transition::{extract_crops, TransitionConfig};

    #[test]
    fn image_roundtrip_preserves_bytes() {
        let img = GrayImage::new(3, 2, vec![0, 50, 100, 150, 200, 250]).unwrap();
        let mut buf = Vec::new();
        img.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"ODGI-IMG v1\n3 2\n"));
        let back = GrayImage::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn image_reader_rejects_garbage() {
        assert!(GrayImage::read_from(&mut &b"PNG\n3 2\n......"[..]).is_err());
        assert!(GrayImage::read_from(&mut &b"ODGI-IMG v1\n3\n..."[..]).is_err());
        // Truncated pixel payload.
        assert!(GrayImage::read_from(&mut &b"ODGI-IMG v1\n3 2\nab"[..]).is_err());
    }

    #[test]
    fn identity_resample_is_exact() {
        let scene = GroundTruthScene::new("r", 64, vec![BBox::new(0.5, 0.5, 0.3, 0.2)]);
        let img = render_scene(&scene, 9);
        let unit = BBox::new(0.5, 0.5, 1.0, 1.0);
        assert_eq!(img.sample_region(&unit, 64), img);
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let cfg = SceneGenConfig { seed: 42, ..Default::default() };
        let a = generate(&cfg, 8).unwrap();
        let b = generate(&cfg, 8).unwrap();
        assert_eq!(a.len(), b.len());
        for ((sa, ia), (sb, ib)) in a.iter().zip(&b) {
            assert_eq!(sa.boxes.len(), sb.boxes.len());
            assert!(sa.boxes.iter().zip(&sb.boxes).all(|(x, y)| x == y));
            assert_eq!(ia, ib);
        }
        let other = generate(&SceneGenConfig { seed: 43, ..Default::default() }, 8).unwrap();
        assert!(a.iter().zip(&other).any(|((sa, _), (sb, _))| sa.boxes != sb.boxes));
    }

    #[test]
    fn zero_mean_objects_gives_empty_scenes() {
        let cfg = SceneGenConfig { mean_objects: 0.0, ..Default::default() };
        let scenes = generate_scenes(&cfg, 5).unwrap();
        assert!(scenes.iter().all(|s| s.boxes.is_empty()));
    }

    #[test]
    fn infeasible_area_is_rejected() {
        let cfg = SceneGenConfig { mean_area_fraction: 1.0, ..Default::default() };
        assert!(generate_scenes(&cfg, 1).is_err());
    }

    #[test]
    fn scene_statistics_converge_to_configured_means() {
        let cfg = SceneGenConfig { seed: 5, ..Default::default() };
        let scenes = generate_scenes(&cfg, 10_000).unwrap();
        let total_boxes: usize = scenes.iter().map(|s| s.boxes.len()).sum();
        let mean_count = total_boxes as f64 / scenes.len() as f64;
        assert!(
            (mean_count - cfg.mean_objects).abs() / cfg.mean_objects < 0.05,
            "object count mean {mean_count}"
        );
        let mean_area: f64 = scenes
            .iter()
            .flat_map(|s| s.boxes.iter().map(|b| b.w * b.h))
            .sum::<f64>()
            / total_boxes as f64;
        assert!(
            (mean_area - cfg.mean_area_fraction).abs() / cfg.mean_area_fraction < 0.05,
            "area mean {mean_area}"
        );
        // Everything stays inside the unit square.
        for s in &scenes {
            for b in &s.boxes {
                let (x0, y0, x1, y1) = b.extent();
                assert!(x0 >= -1e-12 && y0 >= -1e-12 && x1 <= 1.0 + 1e-12 && y1 <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn min_separation_is_respected() {
        let cfg = SceneGenConfig {
            seed: 11,
            mean_objects: 8.0,
            mean_area_fraction: 0.001,
            min_separation: 0.15,
            ..Default::default()
        };
        for s in generate_scenes(&cfg, 50).unwrap() {
            for (i, a) in s.boxes.iter().enumerate() {
                for b in s.boxes.iter().skip(i + 1) {
                    let d = ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt();
                    assert!(d >= 0.15 - 1e-12, "separation violated: {d}");
                }
            }
        }
    }

    #[test]
    fn clustered_generation_caps_cluster_size() {
        let cfg = SceneGenConfig {
            seed: 3,
            mean_objects: 6.0,
            mean_area_fraction: 0.0005,
            clustering: Clustering::Clustered { clusters: 3, spread: 0.02 },
            max_cluster_size: 2,
            cluster_min_distance: 0.25,
            min_separation: 0.03,
            ..Default::default()
        };
        // With spread 0.02 and inter-cluster distance 0.25, boxes within 0.1
        // of each other belong to the same cluster; no such neighborhood may
        // exceed the cap.
        for s in generate_scenes(&cfg, 100).unwrap() {
            for a in &s.boxes {
                let nearby = s
                    .boxes
                    .iter()
                    .filter(|b| {
                        ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt() < 0.1
                    })
                    .count();
                assert!(nearby <= 2, "cluster of size {nearby}");
            }
        }
    }

    #[test]
    fn perfect_oracle_reproduces_targets_exactly() {
        let cfg = SceneGenConfig {
            seed: 21,
            mean_objects: 6.0,
            mean_area_fraction: 0.002,
            clustering: Clustering::Clustered { clusters: 2, spread: 0.03 },
            ..Default::default()
        };
        let grid = GridSpec::square(8).unwrap();
        for scene in generate_scenes(&cfg, 20).unwrap() {
            let out = perfect_stage_output(&scene, grid, DEFAULT_MARGIN);
            let targets = TargetGrid::from_scene(&scene, grid);
            // Zero coordinate loss: box and confidence match their targets.
            let l = coords_loss(&out, &targets, &LossWeights::default()).unwrap();
            assert_eq!(l.value, 0.0);
            // Flags and offsets round-trip through the activations.
            for (p, t) in out.cells.iter().zip(&targets.cells) {
                if !t.occupied {
                    assert_eq!(p.confidence, 0.0);
                    continue;
                }
                assert_eq!(p.group_flag(), t.group_flag);
                let (ow, oh) =
                    grouping::offset_targets(&t.target_box, &t.target_box, DEFAULT_MARGIN);
                let (pw, ph) = p.offsets();
                assert!((pw - ow).abs() < 1e-9 && (ph - oh).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn perfect_oracle_early_exits_every_isolated_object() {
        let scene = GroundTruthScene::new(
            "iso",
            256,
            vec![BBox::new(0.2, 0.2, 0.05, 0.05), BBox::new(0.8, 0.7, 0.05, 0.05)],
        );
        let grid = GridSpec::square(8).unwrap();
        let out = perfect_stage_output(&scene, grid, DEFAULT_MARGIN);
        let cfg = TransitionConfig::new(0.1, 0.9, 0.5, 3).unwrap();
        let outcome = extract_crops(&out, &cfg, 1);
        assert!(outcome.crops.is_empty());
        assert_eq!(outcome.early_exits.len(), 2);
    }

    #[test]
    fn noiseless_noisy_oracle_equals_perfect() {
        let scene = GroundTruthScene::new(
            "nn",
            256,
            vec![BBox::new(0.3, 0.3, 0.08, 0.06), BBox::new(0.32, 0.36, 0.05, 0.05)],
        );
        let grid = GridSpec::square(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy = noisy_stage_output(&scene, grid, DEFAULT_MARGIN, 0.0, 0.0, 0.0, &mut rng);
        let perfect = perfect_stage_output(&scene, grid, DEFAULT_MARGIN);
        for (a, b) in noisy.cells.iter().zip(&perfect.cells) {
            assert_eq!(a.bbox, b.bbox);
            assert_eq!(a.confidence, b.confidence);
            assert_eq!(a.group_logit, b.group_logit);
        }
    }

    #[test]
    fn degraded_oracle_respects_the_area_threshold() {
        // Box of 8px² at 256px input but 32px² at 512px: with a 16px²
        // threshold it is detected only at the finer resolution.
        let side = (8.0f64 / (256.0 * 256.0)).sqrt();
        let scene =
            GroundTruthScene::new("deg", 512, vec![BBox::new(0.3, 0.3, side, side)]);
        let coarse = degraded_stage_output(
            &scene,
            GridSpec::square(8).unwrap(),
            DEFAULT_MARGIN,
            16.0,
            256,
        );
        assert!(coarse.cells.iter().all(|c| c.confidence == 0.0));
        let fine = degraded_stage_output(
            &scene,
            GridSpec::square(16).unwrap(),
            DEFAULT_MARGIN,
            16.0,
            512,
        );
        assert!(fine.cells.iter().any(|c| c.confidence == 1.0));
    }

    #[test]
    fn degraded_oracle_group_union_survives_where_members_vanish() {
        // Two members of 25px² each at 128px would be invisible with a 60px²
        // threshold, but their union (spanning the gap) is large enough.
        let side = (25.0f64 / (128.0 * 128.0)).sqrt();
        let scene = GroundTruthScene::new(
            "grp",
            512,
            vec![
                BBox::new(0.30, 0.30, side, side),
                BBox::new(0.37, 0.37, side, side),
            ],
        );
        let grid = GridSpec::square(4).unwrap();
        let out = degraded_stage_output(&scene, grid, DEFAULT_MARGIN, 60.0, 128);
        let cell = out
            .cells
            .iter()
            .find(|c| c.confidence == 1.0)
            .expect("group cell fires");
        assert!(cell.group_flag());
        // Sanity: each member alone would be below threshold.
        assert!(side * side * 128.0 * 128.0 < 60.0);
    }

    #[test]
    fn oracle_detector_is_deterministic_per_region() {
        let scene = GroundTruthScene::new(
            "det",
            256,
            vec![BBox::new(0.4, 0.4, 0.1, 0.1), BBox::new(0.45, 0.52, 0.08, 0.08)],
        );
        let det = OracleDetector::new(
            OracleConfig::new(
                OracleKind::Noisy { sigma_jitter: 0.02, p_drop: 0.1, p_spurious: 0.05 },
                7,
            ),
            64,
        );
        let sample = RegionSample {
            image_id: "det",
            region: BBox::new(0.5, 0.5, 1.0, 1.0),
            pixels: None,
            scene: Some(&scene),
        };
        let a = det.detect(&sample).unwrap();
        let b = det.detect(&sample).unwrap();
        for (x, y) in a.cells.iter().zip(&b.cells) {
            assert_eq!(x.bbox, y.bbox);
            assert_eq!(x.confidence, y.confidence);
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneGenConfig { seed: 2, image_size_px: 64, ..Default::default() };
        let pairs = generate(&cfg, 4).unwrap();
        let scenes: Vec<GroundTruthScene> = pairs.iter().map(|(s, _)| s.clone()).collect();
        let images: Vec<GrayImage> = pairs.iter().map(|(_, i)| i.clone()).collect();
        write_dataset(dir.path(), &scenes, Some(&images)).unwrap();
        let (rs, ri) = read_dataset(dir.path(), true).unwrap();
        assert_eq!(rs.len(), 4);
        assert_eq!(ri, images);
        for (a, b) in rs.iter().zip(&scenes) {
            assert_eq!(a.image_id, b.image_id);
            assert_eq!(a.image_size_px, 64);
            assert_eq!(a.boxes, b.boxes);
        }
        let (no_img, empty) = read_dataset(dir.path(), false).unwrap();
        assert_eq!(no_img.len(), 4);
        assert!(empty.is_empty());
    }

    #[test]
    fn render_marks_objects_brighter_than_background() {
        let scene = GroundTruthScene::new("b", 128, vec![BBox::new(0.5, 0.5, 0.25, 0.25)]);
        let img = render_scene(&scene, 4);
        let center = img.pixels[64 * 128 + 64];
        assert!(center >= 190);
        let corner = img.pixels[4 * 128 + 4];
        assert!((70..118).contains(&corner));
    }

    #[test]
    fn grid_cell_occupancy_matches_region_restriction() {
        // Restricting to a cell-aligned region and building targets in the
        // local frame must agree with assigning on the full grid.
        let scene = GroundTruthScene::new(
            "rr",
            256,
            vec![BBox::new(0.26, 0.3, 0.1, 0.1), BBox::new(0.8, 0.8, 0.06, 0.06)],
        );
        // Centered region covering [0.25, 0.75]².
        let region = BBox::new(0.5, 0.5, 0.5, 0.5);
        let local = grouping::restrict_to_region(&scene, &region, 0.0).unwrap();
        assert_eq!(local.boxes.len(), 1);
        let grid = GridSpec::square(2).unwrap();
        let targets = TargetGrid::from_scene(&local, grid);
        assert!(targets.cell(CellIndex { row: 0, col: 0 }).occupied);
    }
}
