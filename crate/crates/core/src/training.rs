//! A small trainable detector and the two-stage training loop.
//!
//! The model is deliberately tiny but exact: every grid cell shares one
//! affine map from pooled pixel features to the eight per-cell outputs
//! (box, confidence, group logit, two offset logits). Cells are 32×32
//! pixels at every stage resolution, pooled into a 5×5 grid of block
//! means, so the same weights apply at any stage resolution and the
//! gradient of the full loss can be written down in closed form.
//!
//! Training is a two-phase curriculum. Stage 1 first fits whole images by
//! mini-batch gradient descent under a harmonically decaying learning rate.
//! At the handoff epoch its weights freeze; one fixed set of crops — the
//! most confident, truth-containing regions of every scene — is extracted
//! from it, and stage 2 fits those crops for the remaining epochs. Freezing
//! keeps each stage's objective stationary (box and offset targets are
//! re-resolved against live predictions, so a stage that kept moving would
//! drag the other stage's targets along), which is what makes the loss
//! traces decrease instead of chasing a moving floor.
//!
//! Scenes are visited in a fixed order, per-scene gradients are summed in
//! that order even though they are computed in parallel, and randomness is
//! confined to weight initialization, so resuming from a checkpoint
//! reproduces an uninterrupted run bit for bit.

use std::collections::VecDeque;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxgeom::{resolution_to_grid, BBox, GridSpec};
use crate::grouping::{restrict_to_region, GroundTruthScene, TargetGrid, DEFAULT_MARGIN};
use crate::losses::{
    logit, offset_logit, resolve_offset_targets, sigmoid, total_loss_with_grads, CellPrediction,
    LossWeights, StageGradients, StageOutput, StageRole,
};
use crate::pipeline::{Detector, RegionSample};
use crate::synthdata::GrayImage;
use crate::transition::{extract_crops, TransitionConfig};
use crate::{Error, Result};

/// Pooled blocks per axis within one 32×32-pixel cell.
pub const FEATURE_BLOCKS: usize = 5;
pub const N_FEATURES: usize = FEATURE_BLOCKS * FEATURE_BLOCKS;
/// Features plus a constant bias input.
pub const N_INPUTS: usize = N_FEATURES + 1;
/// tx, ty, w, h, confidence, group logit, two offset logits.
pub const N_OUTPUTS: usize = 8;
/// Pixels per grid cell side at any stage resolution.
pub const CELL_PX: usize = 32;

/// Block row/column boundaries inside a cell: k·32/5 rounded down.
const BLOCK_EDGES: [usize; FEATURE_BLOCKS + 1] = [0, 6, 12, 19, 25, 32];

/// Pixel normalization: roughly zero on background texture, near one on
/// rendered objects.
const PIXEL_OFFSET: f64 = 96.0;
const PIXEL_SCALE: f64 = 128.0;

const ROW_TX: usize = 0;
const ROW_TY: usize = 1;
const ROW_W: usize = 2;
const ROW_H: usize = 3;
const ROW_CONF: usize = 4;
const ROW_GROUP: usize = 5;
const ROW_OW: usize = 6;
const ROW_OH: usize = 7;

/// Per-cell affine detector: `weights[row][input]` flattened row-major,
/// shared by all cells of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPredictor {
    pub resolution_px: u32,
    pub weights: Vec<f64>,
}

impl ToyPredictor {
    /// Random small weights; biases start the model at centered boxes of
    /// width 4% of the frame, confidence 0.1, undecided group flag and a
    /// 2/3 offset (crops 1.5× the predicted box).
    pub fn new(resolution_px: u32, seed: u64) -> Result<Self> {
        resolution_to_grid(resolution_px)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid stddev");
        let mut weights: Vec<f64> =
            (0..N_OUTPUTS * N_INPUTS).map(|_| normal.sample(&mut rng)).collect();
        let bias = |row: usize| row * N_INPUTS + N_FEATURES;
        weights[bias(ROW_TX)] = 0.0;
        weights[bias(ROW_TY)] = 0.0;
        weights[bias(ROW_W)] = logit(0.04);
        weights[bias(ROW_H)] = logit(0.04);
        weights[bias(ROW_CONF)] = logit(0.1);
        weights[bias(ROW_GROUP)] = 0.0;
        weights[bias(ROW_OW)] = offset_logit(2.0 / 3.0);
        weights[bias(ROW_OH)] = offset_logit(2.0 / 3.0);
        Ok(ToyPredictor { resolution_px, weights })
    }

    pub fn grid(&self) -> GridSpec {
        resolution_to_grid(self.resolution_px).expect("validated at construction")
    }

    pub fn n_params(&self) -> usize {
        self.weights.len()
    }

    fn check_pixels(&self, pixels: &GrayImage) -> Result<()> {
        if pixels.width != self.resolution_px || pixels.height != self.resolution_px {
            return Err(Error::Config(format!(
                "predictor expects {0}×{0} pixels, got {1}×{2}",
                self.resolution_px, pixels.width, pixels.height
            )));
        }
        Ok(())
    }

    /// Mean-pooled, normalized features of one cell (bias input last).
    fn cell_features(&self, pixels: &GrayImage, row: usize, col: usize) -> [f64; N_INPUTS] {
        let mut feats = [0.0; N_INPUTS];
        let width = pixels.width as usize;
        let (y0, x0) = (row * CELL_PX, col * CELL_PX);
        for by in 0..FEATURE_BLOCKS {
            for bx in 0..FEATURE_BLOCKS {
                let (r0, r1) = (BLOCK_EDGES[by], BLOCK_EDGES[by + 1]);
                let (c0, c1) = (BLOCK_EDGES[bx], BLOCK_EDGES[bx + 1]);
                let mut sum = 0.0;
                for y in r0..r1 {
                    let base = (y0 + y) * width + x0;
                    for x in c0..c1 {
                        sum += pixels.pixels[base + x] as f64;
                    }
                }
                let mean = sum / ((r1 - r0) * (c1 - c0)) as f64;
                feats[by * FEATURE_BLOCKS + bx] = (mean - PIXEL_OFFSET) / PIXEL_SCALE;
            }
        }
        feats[N_FEATURES] = 1.0;
        feats
    }

    /// Pool the features of every cell. Pooling touches every pixel and is
    /// the expensive half of [`ToyPredictor::forward`], but it depends only
    /// on the image, so callers that re-run the same pixels under changing
    /// weights (the trainer) do it once and keep the result.
    pub fn features(&self, pixels: &GrayImage) -> Result<FeatureGrid> {
        self.check_pixels(pixels)?;
        let grid = self.grid();
        let feats =
            grid.cells().map(|cell| self.cell_features(pixels, cell.row, cell.col)).collect();
        Ok(FeatureGrid { resolution_px: self.resolution_px, feats })
    }

    pub fn forward(&self, pixels: &GrayImage) -> Result<Forward> {
        let features = self.features(pixels)?;
        self.forward_features(&features)
    }

    /// The affine half of [`ToyPredictor::forward`], on pooled features.
    pub fn forward_features(&self, features: &FeatureGrid) -> Result<Forward> {
        if features.resolution_px != self.resolution_px {
            return Err(Error::Config(format!(
                "features were pooled at {} px but the predictor runs at {} px",
                features.resolution_px, self.resolution_px
            )));
        }
        let grid = self.grid();
        let n = grid.cell_count();
        let mut raw = Vec::with_capacity(n);
        let mut cells = Vec::with_capacity(n);
        for (cell, f) in grid.cells().zip(&features.feats) {
            let mut u = [0.0; N_OUTPUTS];
            for (k, out) in u.iter_mut().enumerate() {
                let w = &self.weights[k * N_INPUTS..(k + 1) * N_INPUTS];
                *out = w.iter().zip(f).map(|(a, b)| a * b).sum();
            }
            let cx = (cell.col as f64 + sigmoid(u[ROW_TX])) / grid.cols as f64;
            let cy = (cell.row as f64 + sigmoid(u[ROW_TY])) / grid.rows as f64;
            cells.push(CellPrediction {
                bbox: BBox::new(cx, cy, sigmoid(u[ROW_W]), sigmoid(u[ROW_H])),
                confidence: sigmoid(u[ROW_CONF]),
                group_logit: u[ROW_GROUP],
                offset_logits: (u[ROW_OW], u[ROW_OH]),
            });
            raw.push(u);
        }
        Ok(Forward { output: StageOutput::new(grid, cells)?, feats: features.feats.clone(), raw })
    }

    /// Chain per-cell loss gradients back to the shared weights.
    pub fn backward(&self, fwd: &Forward, grads: &StageGradients) -> Vec<f64> {
        let grid = fwd.output.grid;
        let mut out = vec![0.0; self.weights.len()];
        for (i, (f, u)) in fwd.feats.iter().zip(&fwd.raw).enumerate() {
            let dsig = |z: f64| {
                let s = sigmoid(z);
                s * (1.0 - s)
            };
            let du = [
                grads.bbox[i][0] * dsig(u[ROW_TX]) / grid.cols as f64,
                grads.bbox[i][1] * dsig(u[ROW_TY]) / grid.rows as f64,
                grads.bbox[i][2] * dsig(u[ROW_W]),
                grads.bbox[i][3] * dsig(u[ROW_H]),
                grads.confidence[i] * dsig(u[ROW_CONF]),
                grads.group_logit[i],
                grads.offset_logits[i].0,
                grads.offset_logits[i].1,
            ];
            for (k, duk) in du.iter().enumerate() {
                if *duk == 0.0 {
                    continue;
                }
                let row = &mut out[k * N_INPUTS..(k + 1) * N_INPUTS];
                for (w, x) in row.iter_mut().zip(f) {
                    *w += duk * x;
                }
            }
        }
        out
    }

    pub fn apply_gradients(&mut self, grads: &[f64], learning_rate: f64) {
        for (w, g) in self.weights.iter_mut().zip(grads) {
            *w -= learning_rate * g;
        }
    }
}

/// A forward pass with everything the backward pass needs.
pub struct Forward {
    pub output: StageOutput,
    feats: Vec<[f64; N_INPUTS]>,
    raw: Vec<[f64; N_OUTPUTS]>,
}

/// Pooled per-cell features of one image at a fixed resolution; reusable
/// across weight updates.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    resolution_px: u32,
    feats: Vec<[f64; N_INPUTS]>,
}

impl Detector for ToyPredictor {
    fn detect(&self, sample: &RegionSample<'_>) -> Result<StageOutput> {
        let pixels = sample
            .pixels
            .as_ref()
            .ok_or_else(|| Error::Config("trained detector needs pixels".into()))?;
        Ok(self.forward(pixels)?.output)
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Base step size; epoch `e` uses `learning_rate / (1 + lr_decay * e)`.
    pub learning_rate: f64,
    /// Harmonic learning-rate decay per epoch; 0 keeps the rate constant.
    pub lr_decay: f64,
    /// Multiplier on the learning rate for stage-2 updates. Crop losses sum
    /// over many more active cells than whole-image losses, so stage 2
    /// needs a smaller step for the same stability.
    pub stage2_lr_scale: f64,
    /// Scenes (or queued crops) per gradient step; each step applies the
    /// mean gradient over the batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Margin used when deriving offset targets.
    pub margin: f64,
    pub loss_weights: LossWeights,
    /// Epoch (0-based) at which stage 1 freezes and stage 2 starts fitting
    /// the crops extracted from it.
    pub stage2_start_epoch: usize,
    /// Most-confident crops collected per scene at the handoff. A small cap
    /// keeps the crop set covering every scene rather than whichever scenes
    /// were visited last.
    pub crops_per_scene: usize,
    /// Upper bound on the extracted crop set; the oldest are dropped.
    pub crop_queue_capacity: usize,
    /// A crop is kept for stage-2 training only if some ground-truth box
    /// has at least this fraction of its area inside the crop.
    pub crop_min_area_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 0.2,
            lr_decay: 0.05,
            stage2_lr_scale: 0.1,
            batch_size: 50,
            seed: 0,
            margin: DEFAULT_MARGIN,
            loss_weights: LossWeights::default(),
            stage2_start_epoch: 25,
            crops_per_scene: 2,
            crop_queue_capacity: 1024,
            crop_min_area_ratio: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_decay >= 0.0) || !self.lr_decay.is_finite() {
            return Err(Error::Config(format!(
                "lr_decay must be non-negative, got {}",
                self.lr_decay
            )));
        }
        if !(self.stage2_lr_scale > 0.0) || !self.stage2_lr_scale.is_finite() {
            return Err(Error::Config(format!(
                "stage2_lr_scale must be positive, got {}",
                self.stage2_lr_scale
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::Config("margin must be non-negative".into()));
        }
        if self.crops_per_scene == 0 {
            return Err(Error::Config("crops_per_scene must be at least 1".into()));
        }
        if self.crop_queue_capacity == 0 {
            return Err(Error::Config("crop_queue_capacity must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.crop_min_area_ratio) {
            return Err(Error::Config("crop_min_area_ratio must be in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageModel {
    pub stage1: ToyPredictor,
    pub stage2: ToyPredictor,
}

impl TwoStageModel {
    /// The untrained starting point that [`train_two_stage`] refines for a
    /// given master seed; useful as a before/after baseline.
    pub fn init(stage1_px: u32, stage2_px: u32, seed: u64) -> Result<Self> {
        Ok(TwoStageModel {
            stage1: ToyPredictor::new(stage1_px, derived_seed(seed, 1))?,
            stage2: ToyPredictor::new(stage2_px, derived_seed(seed, 2))?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean stage-1 loss per scene (constant once stage 1 is frozen).
    pub stage1_loss: f64,
    /// Mean stage-2 loss per crop; absent before the handoff epoch or when
    /// no crop qualified.
    pub stage2_loss: Option<f64>,
    pub stage2_samples: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub model: TwoStageModel,
    pub history: Vec<EpochStats>,
}

fn derived_seed(seed: u64, stream: u64) -> u64 {
    (seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// One stage-2 training example: a crop's pooled features (the pixels are
/// only resampled once, at extraction) and its region-local ground truth.
struct CropSample {
    features: FeatureGrid,
    truth: GroundTruthScene,
}

/// Train both stages from scratch. Equivalent to [`train_epochs`] over
/// `0..cfg.epochs` on freshly initialized models.
pub fn train_two_stage(
    stage1_px: u32,
    stage2_px: u32,
    scenes: &[GroundTruthScene],
    images: &[GrayImage],
    cfg: &TrainConfig,
) -> Result<TrainingRun> {
    let mut model = TwoStageModel::init(stage1_px, stage2_px, cfg.seed)?;
    let history = train_epochs(&mut model, scenes, images, cfg, 0..cfg.epochs)?;
    Ok(TrainingRun { model, history })
}

/// Run the training loop for the given epoch indices, mutating the model in
/// place. Because each epoch depends only on the model weights and the data
/// order, `train_epochs(m, …, 0..n)` equals `train_epochs(m, …, 0..k)`
/// followed by `train_epochs(m, …, k..n)`.
pub fn train_epochs(
    model: &mut TwoStageModel,
    scenes: &[GroundTruthScene],
    images: &[GrayImage],
    cfg: &TrainConfig,
    epochs: Range<usize>,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("no training scenes".into()));
    }
    if scenes.len() != images.len() {
        return Err(Error::Config(format!(
            "{} scenes but {} images",
            scenes.len(),
            images.len()
        )));
    }
    let grid1 = model.stage1.grid();
    let grid2 = model.stage2.grid();
    // Keep every positive-confidence box (no early exit, no suppression) and
    // take the top crops of each scene.
    let permissive = TransitionConfig::new(0.0, 1.0, 1.0, cfg.crops_per_scene)?;
    let unit = BBox::new(0.5, 0.5, 1.0, 1.0);
    let mut history = Vec::with_capacity(epochs.len());

    let pairs: Vec<(&GroundTruthScene, &GrayImage)> = scenes.iter().zip(images).collect();

    // Stage-1 features depend only on the pixels, so pool them once up
    // front instead of once per epoch.
    let stage1_features: Vec<FeatureGrid> = {
        let stage1 = &model.stage1;
        pairs
            .par_iter()
            .map(|&(_, image)| {
                if image.width == stage1.resolution_px && image.height == stage1.resolution_px {
                    stage1.features(image)
                } else {
                    stage1.features(&image.sample_region(&unit, stage1.resolution_px))
                }
            })
            .collect::<Result<_>>()?
    };

    // Built once, lazily, at the first epoch past the handoff: stage 1 is
    // frozen from then on, so the crop set (a pure function of its weights
    // and the data) never changes again.
    let mut crop_set: Option<Vec<CropSample>> = None;

    for epoch in epochs {
        let lr = cfg.learning_rate / (1.0 + cfg.lr_decay * epoch as f64);
        let train_stage1 = epoch < cfg.stage2_start_epoch;
        let mut stage1_total = 0.0;

        for (batch, features) in
            pairs.chunks(cfg.batch_size).zip(stage1_features.chunks(cfg.batch_size))
        {
            let stage1 = &model.stage1;
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .zip(features.par_iter())
                .map(|(&(scene, _), features)| {
                    let fwd = stage1.forward_features(features)?;
                    let targets = TargetGrid::from_scene(scene, grid1);
                    let targets = resolve_offset_targets(&targets, &fwd.output, cfg.margin)?;
                    let (loss, grads) = total_loss_with_grads(
                        &fwd.output,
                        &targets,
                        &cfg.loss_weights,
                        StageRole::Intermediate,
                    )?;
                    if !loss.total.is_finite() {
                        return Err(Error::NonFiniteLoss { stage: 1, epoch });
                    }
                    let pgrads =
                        if train_stage1 { stage1.backward(&fwd, &grads) } else { Vec::new() };
                    Ok((loss.total, pgrads))
                })
                .collect::<Result<_>>()?;

            for (loss_total, _) in &results {
                stage1_total += loss_total;
            }
            if train_stage1 {
                // Sum in scene order so the update is independent of
                // scheduling.
                let mut acc = vec![0.0; model.stage1.n_params()];
                for (_, pgrads) in &results {
                    for (a, g) in acc.iter_mut().zip(pgrads) {
                        *a += g;
                    }
                }
                let scale = 1.0 / batch.len() as f64;
                acc.iter_mut().for_each(|a| *a *= scale);
                model.stage1.apply_gradients(&acc, lr);
            }
        }

        let mut stage2_total = 0.0;
        let mut stage2_samples = 0;
        if !train_stage1 {
            if crop_set.is_none() {
                crop_set =
                    Some(collect_crop_set(model, &pairs, &stage1_features, &permissive, cfg)?);
            }
            let samples = crop_set.as_deref().expect("just filled");
            stage2_samples = samples.len();
            for batch in samples.chunks(cfg.batch_size) {
                let stage2 = &model.stage2;
                let results: Vec<(f64, Vec<f64>)> = batch
                    .par_iter()
                    .map(|sample| {
                        let fwd = stage2.forward_features(&sample.features)?;
                        let targets = TargetGrid::from_scene(&sample.truth, grid2);
                        let targets = resolve_offset_targets(&targets, &fwd.output, cfg.margin)?;
                        let (loss, grads) = total_loss_with_grads(
                            &fwd.output,
                            &targets,
                            &cfg.loss_weights,
                            StageRole::Final,
                        )?;
                        if !loss.total.is_finite() {
                            return Err(Error::NonFiniteLoss { stage: 2, epoch });
                        }
                        Ok((loss.total, stage2.backward(&fwd, &grads)))
                    })
                    .collect::<Result<_>>()?;

                let mut acc = vec![0.0; model.stage2.n_params()];
                for (loss_total, pgrads) in &results {
                    stage2_total += loss_total;
                    for (a, g) in acc.iter_mut().zip(pgrads) {
                        *a += g;
                    }
                }
                let scale = 1.0 / batch.len() as f64;
                acc.iter_mut().for_each(|a| *a *= scale);
                model.stage2.apply_gradients(&acc, lr * cfg.stage2_lr_scale);
            }
        }

        history.push(EpochStats {
            epoch,
            stage1_loss: stage1_total / scenes.len() as f64,
            stage2_loss: (stage2_samples > 0).then(|| stage2_total / stage2_samples as f64),
            stage2_samples,
        });
    }
    Ok(history)
}

/// Extract the fixed stage-2 training set from the (frozen) stage 1: the
/// `crops_per_scene` most confident crops of every scene that still contain
/// ground truth, features pooled once, bounded by the queue capacity
/// (oldest dropped).
fn collect_crop_set(
    model: &TwoStageModel,
    pairs: &[(&GroundTruthScene, &GrayImage)],
    stage1_features: &[FeatureGrid],
    permissive: &TransitionConfig,
    cfg: &TrainConfig,
) -> Result<Vec<CropSample>> {
    let per_scene: Vec<Vec<CropSample>> = pairs
        .par_iter()
        .zip(stage1_features.par_iter())
        .map(|(&(scene, image), features)| {
            let fwd = model.stage1.forward_features(features)?;
            let outcome = extract_crops(&fwd.output, permissive, 1);
            let mut crops = Vec::new();
            for crop in &outcome.crops {
                let Ok(local) = restrict_to_region(scene, &crop.region, cfg.crop_min_area_ratio)
                else {
                    continue;
                };
                if local.boxes.is_empty() {
                    continue;
                }
                let pixels = image.sample_region(&crop.region, model.stage2.resolution_px);
                crops.push(CropSample {
                    features: model.stage2.features(&pixels)?,
                    truth: local,
                });
            }
            Ok(crops)
        })
        .collect::<Result<_>>()?;

    let mut queue: VecDeque<CropSample> = VecDeque::new();
    for crops in per_scene {
        for sample in crops {
            if queue.len() == cfg.crop_queue_capacity {
                queue.pop_front();
            }
            queue.push_back(sample);
        }
    }
    Ok(Vec::from(queue))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_FORMAT: &str = "odgi-ckpt v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub model: TwoStageModel,
    pub history: Vec<EpochStats>,
}

impl Checkpoint {
    pub fn new(
        config: TrainConfig,
        epochs_done: usize,
        model: TwoStageModel,
        history: Vec<EpochStats>,
    ) -> Self {
        Checkpoint { format: CHECKPOINT_FORMAT.to_string(), config, epochs_done, model, history }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "unsupported checkpoint format {:?}, expected {:?}",
                ckpt.format, CHECKPOINT_FORMAT
            )));
        }
        Ok(ckpt)
    }
}
