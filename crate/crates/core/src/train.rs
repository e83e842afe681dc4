//! Training loop: fresh masked triplets every epoch, AdamW updates with a
//! step learning-rate schedule, and per-scale validation thresholds.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::inference::{checkerboard_maps, mean_maps, patch_means};
use crate::masking::{make_training_triplet, GridSpec, ScaleSet, Triplet, DEFAULT_P_MASK};
use crate::metrics::{LossTerms, LossWeights, SimilarityConfig};
use crate::net::{batch_gradients, ArchConfig, ModelParams, Restorer};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Epochs between learning-rate halvings.
    pub lr_halving_period: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub similarity: SimilarityConfig,
    pub scales: ScaleSet,
    pub p_mask: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 8,
            lr0: 1e-4,
            lr_halving_period: 50,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            similarity: SimilarityConfig::default(),
            scales: ScaleSet::default(),
            p_mask: DEFAULT_P_MASK,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.lr_halving_period == 0 {
            return bad("epochs, batch_size and lr_halving_period must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(self.p_mask > 0.0 && self.p_mask < 1.0) {
            return bad("p_mask must lie in (0, 1)");
        }
        self.weights.validate()?;
        self.similarity.gms.validate()?;
        self.similarity.ssim.validate()
    }

    /// `lr0 · 0.5^⌊epoch / period⌋`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * 0.5f64.powi((epoch / self.lr_halving_period) as i32)
    }
}

/// Per-scale patch thresholds `η_k`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<usize, f64>", into = "BTreeMap<usize, f64>")]
pub struct ThresholdTable(BTreeMap<usize, f64>);

impl ThresholdTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, cell: usize, eta: f64) -> Result<()> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "threshold {eta} for grid size {cell}"
            )));
        }
        self.0.insert(cell, eta);
        Ok(())
    }

    pub fn get(&self, cell: usize) -> Result<f64> {
        self.0
            .get(&cell)
            .copied()
            .ok_or(Error::MissingThreshold(cell))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.0.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<BTreeMap<usize, f64>> for ThresholdTable {
    type Error = Error;

    fn try_from(map: BTreeMap<usize, f64>) -> Result<Self> {
        let mut t = Self::new();
        for (k, v) in map {
            t.insert(k, v)?;
        }
        Ok(t)
    }
}

impl From<ThresholdTable> for BTreeMap<usize, f64> {
    fn from(t: ThresholdTable) -> Self {
        t.0
    }
}

/// Largest patch-mean error of one image's checkerboard reconstruction at
/// grid size `cell`.
pub fn max_patch_error<R: Restorer + ?Sized>(
    restorer: &R,
    image: &Image,
    cell: usize,
    cfg: &SimilarityConfig,
) -> Result<f64> {
    let maps = checkerboard_maps(restorer, image, cell, cfg)?;
    let scores = mean_maps(&maps);
    let grid = GridSpec::new(cell, image.height(), image.width())?;
    Ok(patch_means(&scores, grid)?.into_iter().fold(0.0, f64::max))
}

/// `η_k`: maximum patch error over all validation images, per scale.
pub fn compute_thresholds<R: Restorer + ?Sized>(
    restorer: &R,
    validation: &[Image],
    scales: &ScaleSet,
    cfg: &SimilarityConfig,
) -> Result<ThresholdTable> {
    if validation.is_empty() {
        return Err(Error::Precondition("empty validation set".into()));
    }
    let mut table = ThresholdTable::new();
    for k in scales.iter() {
        let maxima: Vec<f64> = validation
            .par_iter()
            .map(|img| max_patch_error(restorer, img, k, cfg))
            .collect::<Result<_>>()?;
        table.insert(k, maxima.into_iter().fold(0.0, f64::max))?;
    }
    Ok(table)
}

/// Seeded hold-out split: returns `(train, validation)` with
/// `max(1, round(fraction·n))` validation images, each side in input order.
pub fn split_validation(
    images: Vec<Image>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Image>, Vec<Image>)> {
    if images.len() < 2 {
        return Err(Error::Precondition(
            "need at least two images to hold out a validation split".into(),
        ));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "validation fraction {fraction} outside (0, 1)"
        )));
    }
    let n = images.len();
    let n_val = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[0x7a1d]));
    let mut held = vec![false; n];
    order[..n_val].iter().for_each(|&i| held[i] = true);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (img, h) in images.into_iter().zip(held) {
        if h {
            val.push(img);
        } else {
            train.push(img);
        }
    }
    Ok((train, val))
}

/// AdamW with decoupled weight decay on `.weight` tensors only.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &ModelParams<f32>, cfg: &TrainConfig) -> Self {
        let zeros = || {
            params
                .tensors
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, (p, g)) in params.tensors.iter_mut().zip(&grads.tensors).enumerate() {
            let decay = if p.decays() { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j] as f64;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let theta = p.data[j] as f64;
                p.data[j] = (theta - lr * (mhat / (vhat.sqrt() + self.eps) + decay * theta)) as f32;
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossTerms,
    pub wall_time_s: f64,
}

/// Hooks called by [`train`].
pub trait TrainObserver {
    fn epoch_end(&mut self, _record: &EpochRecord, _params: &ModelParams<f32>) -> Result<()> {
        Ok(())
    }

    /// Called with the last parameters that produced a finite loss before
    /// training aborts.
    fn aborted(&mut self, _last_good: &ModelParams<f32>, _error: &Error) {}
}

impl TrainObserver for () {}

pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub thresholds: ThresholdTable,
    pub log: Vec<EpochRecord>,
}

/// Triplets of one epoch, in the epoch's shuffled order. The mask of image
/// `i` at epoch `e` depends only on `(seed, e, i)`.
pub fn epoch_triplets(images: &[Image], cfg: &TrainConfig, epoch: usize) -> Result<Vec<Triplet>> {
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, &[0xe90c, epoch as u64]));
    order
        .par_iter()
        .map(|&i| {
            let seed = rng::derive_seed(cfg.seed, &[0x7219, epoch as u64, i as u64]);
            make_training_triplet(&images[i], &cfg.scales, seed, cfg.p_mask)
        })
        .collect()
}

/// Trains from a seeded initialization, then computes thresholds on the
/// validation images.
pub fn train(
    arch: &ArchConfig,
    images: &[Image],
    validation: &[Image],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let params = ModelParams::<f32>::init(arch, rng::derive_seed(cfg.seed, &[0x1a17]))?;
    train_from(params, images, validation, cfg, observer)
}

/// [`train`] starting from given parameters.
pub fn train_from(
    mut params: ModelParams<f32>,
    images: &[Image],
    validation: &[Image],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    if validation.is_empty() {
        return Err(Error::Precondition("empty validation set".into()));
    }
    let arch = &params.arch;
    for img in images.iter().chain(validation) {
        if img.shape() != (arch.in_channels, arch.height, arch.width) {
            return Err(Error::shape(
                format!("{}x{}x{}", arch.in_channels, arch.height, arch.width),
                format!("{:?}", img.shape()),
            ));
        }
    }
    cfg.scales.validate_for(arch.height, arch.width)?;

    let mut opt = AdamW::new(&params, cfg);
    let mut log = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let triplets = epoch_triplets(images, cfg, epoch)?;
        let mut sum = LossTerms::default();
        for (step, batch) in triplets.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = batch_gradients(&params, batch, &cfg.weights, &cfg.similarity)?;
            let mean = loss.mean();
            if !mean.is_finite() || !grads.is_finite() {
                let err = Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("{mean:?}"),
                };
                observer.aborted(&params, &err);
                return Err(err);
            }
            sum.add(&loss.sum);
            opt.update(&mut params, &grads, lr);
        }
        let record = EpochRecord {
            epoch,
            lr,
            loss: sum.scaled(1.0 / images.len() as f64),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        observer.epoch_end(&record, &params)?;
        log.push(record);
    }
    let thresholds = compute_thresholds(&params, validation, &cfg.scales, &cfg.similarity)?;
    Ok(TrainOutcome {
        params,
        thresholds,
        log,
    })
}
