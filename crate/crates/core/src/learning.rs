//! Weakly supervised training: round-trip correspondence mining inside
//! object boxes, balanced batch selection, the contrastive loss and an SGD
//! with momentum loop.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::descriptor::{extract_backward_traced, extract_dense_traced, DenseDescriptorField};
use crate::error::{Error, Result};
use crate::matching::{argmin_rows, sq_dist};
use crate::model::{Model, ModelGrad, ParamGroup};
use crate::tensor::Tensor;
use crate::Real;

pub use crate::matching::BBox;

pub const DEFAULT_MARGIN: Real = 0.2;
pub const DEFAULT_BATCH_CAP: usize = 1024;
pub const DEFAULT_TAU: Real = 1.0;
pub const DEFAULT_MOMENTUM: Real = 0.9;
pub const DEFAULT_LEARNING_RATE: Real = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pixel {
    pub x: usize,
    pub y: usize,
}

impl Pixel {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    fn from_index(i: usize, width: usize) -> Self {
        Self::new(i % width, i / width)
    }

    fn distance(&self, other: &Pixel) -> Real {
        let dx = self.x as Real - other.x as Real;
        let dy = self.y as Real - other.y as Real;
        (dx * dx + dy * dy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePairSample {
    pub source: Tensor,
    pub target: Tensor,
    pub source_bbox: BBox,
    pub target_bbox: BBox,
}

impl ImagePairSample {
    pub fn new(source: Tensor, target: Tensor, source_bbox: BBox, target_bbox: BBox) -> Result<Self> {
        source_bbox.check(source.width(), source.height())?;
        target_bbox.check(target.width(), target.height())?;
        Ok(Self {
            source,
            target,
            source_bbox,
            target_bbox,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Hinge margin on the squared distance of negatives.
    pub margin: Real,
    /// Upper bound on the share of positives in a batch.
    pub positive_fraction: Real,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            positive_fraction: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(Error::Config(format!(
                "positive fraction must lie in (0, 1), got {}",
                self.positive_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningConfig {
    /// Round-trip tolerance in pixels.
    pub tau: Real,
    /// Source pixels sampled per pair before the consistency check.
    pub candidates: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            candidates: 4 * DEFAULT_BATCH_CAP,
        }
    }
}

/// One sampled source pixel, its best match and the match's back-match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinedPair {
    pub source: Pixel,
    pub target: Pixel,
    pub back: Pixel,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MinedSet {
    pub pairs: Vec<MinedPair>,
}

impl MinedSet {
    pub fn positives(&self) -> impl Iterator<Item = &MinedPair> {
        self.pairs.iter().filter(|p| p.positive)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &MinedPair> {
        self.pairs.iter().filter(|p| !p.positive)
    }

    pub fn positive_count(&self) -> usize {
        self.positives().count()
    }
}

/// Sample source pixels uniformly from `bbox_a` and label each by whether
/// its nearest neighbour in `bbox_b` maps back to within `tau`. Ties in the
/// nearest-neighbour search go to the first pixel in scan order.
pub fn mine_correspondences(
    a: &DenseDescriptorField,
    b: &DenseDescriptorField,
    bbox_a: BBox,
    bbox_b: BBox,
    config: &MiningConfig,
    rng: &mut impl Rng,
) -> Result<MinedSet> {
    let dim = a.dim();
    if b.dim() != dim {
        return Err(Error::Shape(format!("descriptor dims differ: {dim} vs {}", b.dim())));
    }
    if !(config.tau >= 0.0) {
        return Err(Error::Config(format!("tau must be non-negative, got {}", config.tau)));
    }
    bbox_a.check(a.width(), a.height())?;
    bbox_b.check(b.width(), b.height())?;
    let (wa, wb) = (a.width(), b.width());
    let cand_a = bbox_a.pixels(wa);
    let cand_b = bbox_b.pixels(wb);
    let take = config.candidates.min(cand_a.len());
    let mut picks: Vec<usize> = sample(rng, cand_a.len(), take).into_iter().map(|k| cand_a[k]).collect();
    picks.sort_unstable();

    let rows_a = a.pixel_major();
    let rows_b = b.pixel_major();
    let forward: Vec<usize> = picks
        .par_iter()
        .map(|&i| argmin_rows(&rows_a[i * dim..(i + 1) * dim], &rows_b, dim, &cand_b))
        .collect();
    let mut targets = forward.clone();
    targets.sort_unstable();
    targets.dedup();
    let backs: HashMap<usize, usize> = targets
        .par_iter()
        .map(|&j| (j, argmin_rows(&rows_b[j * dim..(j + 1) * dim], &rows_a, dim, &cand_a)))
        .collect();

    let pairs = picks
        .iter()
        .zip(&forward)
        .map(|(&i, &j)| {
            let source = Pixel::from_index(i, wa);
            let back = Pixel::from_index(backs[&j], wa);
            MinedPair {
                source,
                target: Pixel::from_index(j, wb),
                back,
                positive: source.distance(&back) <= config.tau,
            }
        })
        .collect();
    Ok(MinedSet { pairs })
}

/// Labelled pairs fed to the loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingBatch {
    pub positives: Vec<(Pixel, Pixel)>,
    pub negatives: Vec<(Pixel, Pixel)>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Draw at most `cap` pairs with at most `positive_fraction` positives.
    /// If the positives are scarce, negatives are subsampled so the ratio
    /// still holds; if either side is empty the other fills the batch.
    pub fn select(mined: &MinedSet, cap: usize, positive_fraction: Real, rng: &mut impl Rng) -> Self {
        let pos: Vec<(Pixel, Pixel)> = mined.positives().map(|p| (p.source, p.target)).collect();
        let neg: Vec<(Pixel, Pixel)> = mined.negatives().map(|p| (p.source, p.target)).collect();
        let (pos_take, neg_take) = if pos.is_empty() || neg.is_empty() {
            (pos.len().min(cap), neg.len().min(cap))
        } else {
            let by_cap = (cap as Real * positive_fraction).floor() as usize;
            let by_neg = (neg.len() as Real * positive_fraction / (1.0 - positive_fraction)).ceil() as usize;
            let p = pos.len().min(by_cap).min(by_neg).max(1);
            (p, neg.len().min(cap - p))
        };
        let mut pick = |v: &[(Pixel, Pixel)], k: usize| -> Vec<(Pixel, Pixel)> {
            let mut idx = sample(rng, v.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| v[i]).collect()
        };
        let positives = pick(&pos, pos_take);
        let negatives = pick(&neg, neg_take);
        Self {
            positives,
            negatives,
        }
    }
}

/// Loss and its gradient with respect to both fields.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: Real,
    pub grad_a: Tensor,
    pub grad_b: Tensor,
}

/// `(1/2N) * sum(l * d^2 + (1 - l) * max(0, C - d^2))` over the batch.
pub fn contrastive_loss(
    batch: &TrainingBatch,
    a: &DenseDescriptorField,
    b: &DenseDescriptorField,
    margin: Real,
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let n = batch.len() as Real;
    let mut grad_a = Tensor::zeros(a.dim(), a.height(), a.width());
    let mut grad_b = Tensor::zeros(b.dim(), b.height(), b.width());
    let mut loss = 0.0;
    let labelled = batch
        .positives
        .iter()
        .map(|p| (p, true))
        .chain(batch.negatives.iter().map(|p| (p, false)));
    for ((pa, pb), positive) in labelled {
        let fa = a.descriptor_at(pa.x, pa.y)?;
        let fb = b.descriptor_at(pb.x, pb.y)?;
        let d2 = sq_dist(&fa, &fb);
        let coef = if positive {
            loss += d2;
            1.0
        } else if d2 < margin {
            loss += margin - d2;
            -1.0
        } else {
            continue;
        };
        for (c, (x, y)) in fa.iter().zip(&fb).enumerate() {
            let g = coef * (x - y) / n;
            *grad_a.at_mut(c, pa.y, pa.x) += g;
            *grad_b.at_mut(c, pb.y, pb.x) -= g;
        }
    }
    Ok(LossOutput {
        loss: loss / (2.0 * n),
        grad_a,
        grad_b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: Real,
    pub momentum: Real,
    pub batch_cap: usize,
    pub loss: LossConfig,
    pub mining: MiningConfig,
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            batch_cap: DEFAULT_BATCH_CAP,
            loss: LossConfig::default(),
            mining: MiningConfig::default(),
            freeze_backbone: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_cap == 0 || self.mining.candidates == 0 {
            return Err(Error::Config("batch cap and candidate count must be positive".into()));
        }
        Ok(())
    }
}

/// Velocity buffer in [`Model::flatten`] order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    velocity: Vec<Real>,
}

impl OptimizerState {
    /// `v = momentum * v - lr * g; p += v`, then offsets are pulled back
    /// inside the pattern radius. Frozen backbone entries are left alone.
    pub fn step(&mut self, model: &mut Model, grad: &ModelGrad, config: &TrainConfig) {
        let flat = model.flatten();
        let g = grad.flatten();
        if self.velocity.len() != flat.len() {
            self.velocity = vec![0.0; flat.len()];
        }
        let mut values = Vec::with_capacity(flat.len());
        for (k, (group, p)) in flat.into_iter().enumerate() {
            let frozen = config.freeze_backbone
                && matches!(group, ParamGroup::BackboneWeight | ParamGroup::BackboneBias);
            if frozen {
                values.push(p);
                continue;
            }
            let v = &mut self.velocity[k];
            *v = config.momentum * *v - config.learning_rate * g[k];
            values.push(p + *v);
        }
        model.set_flat(&values);
        let radius = model.css.pattern_radius;
        model.patterns.clamp_to_radius(radius);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    pub loss: Real,
    /// Pairs in the loss batch.
    pub positives: usize,
    pub negatives: usize,
    /// Round-trip positives among all sampled candidates.
    pub mined_positives: usize,
    pub mined_candidates: usize,
    /// Mean Euclidean descriptor distance over mined positives.
    pub mean_positive_distance: Real,
    /// Sum of the positive terms alone, `(1/2N) * sum(d^2)`.
    pub positive_loss: Real,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochStats {
    pub pairs: Vec<PairStats>,
}

impl EpochStats {
    pub fn mean_loss(&self) -> Real {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().map(|p| p.loss).sum::<Real>() / self.pairs.len() as Real
    }

    pub fn total_positives(&self) -> usize {
        self.pairs.iter().map(|p| p.positives).sum()
    }

    pub fn total_negatives(&self) -> usize {
        self.pairs.iter().map(|p| p.negatives).sum()
    }

    /// Weighted by the number of mined positives of each pair.
    pub fn mean_positive_distance(&self) -> Real {
        let n: usize = self.pairs.iter().map(|p| p.mined_positives).sum();
        if n == 0 {
            return 0.0;
        }
        self.pairs
            .iter()
            .map(|p| p.mean_positive_distance * p.mined_positives as Real)
            .sum::<Real>()
            / n as Real
    }
}

/// Mine, score and update on a single pair.
pub fn train_step(
    pair: &ImagePairSample,
    model: &mut Model,
    state: &mut OptimizerState,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<PairStats> {
    let (fa, tape_a) = extract_dense_traced(&pair.source, model)?;
    let (fb, tape_b) = extract_dense_traced(&pair.target, model)?;
    let mined = mine_correspondences(&fa, &fb, pair.source_bbox, pair.target_bbox, &config.mining, rng)?;
    let mined_positives = mined.positive_count();
    let mean_positive_distance = if mined_positives == 0 {
        0.0
    } else {
        let mut total = 0.0;
        for p in mined.positives() {
            let u = fa.descriptor_at(p.source.x, p.source.y)?;
            let v = fb.descriptor_at(p.target.x, p.target.y)?;
            total += sq_dist(&u, &v).sqrt();
        }
        total / mined_positives as Real
    };
    let batch = TrainingBatch::select(&mined, config.batch_cap, config.loss.positive_fraction, rng);
    let out = contrastive_loss(&batch, &fa, &fb, config.loss.margin)?;
    let mut positive_loss = 0.0;
    for (pa, pb) in &batch.positives {
        positive_loss += sq_dist(&fa.descriptor_at(pa.x, pa.y)?, &fb.descriptor_at(pb.x, pb.y)?);
    }
    positive_loss /= 2.0 * batch.len() as Real;

    let mut grad = extract_backward_traced(&tape_a, model, &out.grad_a, config.freeze_backbone)?;
    grad.add_assign(&extract_backward_traced(&tape_b, model, &out.grad_b, config.freeze_backbone)?);
    state.step(model, &grad, config);
    Ok(PairStats {
        loss: out.loss,
        positives: batch.positives.len(),
        negatives: batch.negatives.len(),
        mined_positives,
        mined_candidates: mined.pairs.len(),
        mean_positive_distance,
        positive_loss,
    })
}

/// One pass over `pairs` in order, one parameter update per pair.
pub fn train_epoch(
    pairs: &[ImagePairSample],
    model: &mut Model,
    state: &mut OptimizerState,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<EpochStats> {
    config.validate()?;
    let mut stats = EpochStats::default();
    for pair in pairs {
        stats.pairs.push(train_step(pair, model, state, config, rng)?);
    }
    Ok(stats)
}
