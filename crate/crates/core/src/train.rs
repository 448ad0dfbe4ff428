//! Image-centric SGD training with a detection-only bootstrap phase.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WeakImage;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{LossBreakdown, LossConfig, Model, Stage};
use crate::numerics::sgd_momentum_step;
use crate::wsod::RefineConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Epochs of the full objective, after bootstrap.
    pub epochs: usize,
    /// Detection-only epochs on unrefined proposals.
    pub bootstrap_epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub flip: bool,
    /// Random rescaling of feature magnitudes by a factor in `[0.8, 1.2]`.
    pub scale_jitter: bool,
    pub loss: LossConfig,
    pub refine: RefineConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            bootstrap_epochs: 3,
            lr: 0.01,
            momentum: 0.9,
            flip: true,
            scale_jitter: false,
            loss: LossConfig::default(),
            refine: RefineConfig::default(),
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.loss.alpha >= 0.0 && self.loss.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be non-negative", self.loss.alpha)));
        }
        if self.loss.top_m == 0 {
            return Err(Error::Config("top_m must be positive".into()));
        }
        Ok(())
    }
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub images: usize,
    pub obj: f64,
    pub pred: f64,
    pub reg: f64,
    pub total: f64,
}

fn run_epoch(
    model: &mut Model,
    images: &[WeakImage],
    kept: Option<&[Vec<usize>]>,
    config: &TrainConfig,
    stage: Stage,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpochLog> {
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(rng);
    let mut sum = LossBreakdown::default();
    for &n in &order {
        let mut view = if config.flip && rng.random_bool(0.5) {
            images[n].flipped()
        } else {
            images[n].clone()
        };
        if config.scale_jitter {
            let s: f32 = rng.random_range(0.8..1.2);
            view.features.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        let boxes: Vec<BBox> = match kept {
            Some(k) => k[n].iter().map(|&i| view.proposals[i]).collect(),
            None => view.proposals.clone(),
        };
        sum += model.train_step(&view, &boxes, &config.loss, stage, rng)?;
        sgd_momentum_step(model.params_mut(), config.lr, config.momentum);
    }
    let d = images.len().max(1) as f64;
    Ok(EpochLog {
        epoch,
        stage,
        images: images.len(),
        obj: sum.obj / d,
        pred: sum.pred / d,
        reg: sum.reg / d,
        total: sum.total / d,
    })
}

/// Trains `model` on weak images: bootstrap epochs on all proposals, then a
/// frozen refinement, then full-objective epochs on the refined proposals.
/// `on_epoch` sees each epoch's log as it completes.
pub fn train(
    model: &mut Model,
    images: &[WeakImage],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut logs = Vec::new();
    for e in 0..config.bootstrap_epochs {
        let log = run_epoch(model, images, None, config, Stage::Bootstrap, e + 1, &mut rng)?;
        on_epoch(&log);
        logs.push(log);
    }
    if config.bootstrap_epochs > 0 {
        model.refiner = Some(model.wsod.clone());
    }
    let kept: Vec<Vec<usize>> = images
        .iter()
        .map(|img| model.refine(&img.features, &img.proposals, &config.refine))
        .collect::<Result<_>>()?;
    for e in 0..config.epochs {
        let epoch = config.bootstrap_epochs + e + 1;
        let log = run_epoch(model, images, Some(&kept), config, Stage::Full, epoch, &mut rng)?;
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Writes the epoch logs as CSV.
pub fn write_loss_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for log in logs {
        w.serialize(log).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
