use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ClientModel, LossConfig};
use crate::data::{augment, batch_images, AugmentConfig, ClientDataset, Image};
use crate::error::{Error, Result};
use crate::nn::{scalar, SgdConfig, SgdMomentum};
use crate::seed::{mix, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Full passes over the local dataset.
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub augment: bool,
    pub augmentation: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            sgd: SgdConfig::default(),
            augment: true,
            augmentation: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("optim: batch_size must be at least 1".into()));
        }
        if !(self.sgd.lr > 0.0) || !(0.0..1.0).contains(&self.sgd.momentum) {
            return Err(Error::Config(format!(
                "optim: lr must be > 0 and momentum in [0, 1) (lr={}, momentum={})",
                self.sgd.lr, self.sgd.momentum
            )));
        }
        Ok(())
    }
}

/// Transforms training inputs before the gradient step (e.g. detect and
/// purify). Returned images replace the inputs one-for-one.
pub trait DefenseHook: Send + Sync {
    fn apply(&self, images: Vec<Image>, sample_ids: &[u64]) -> Result<Vec<Image>>;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalReport {
    /// Mean per-sample objective for each epoch.
    pub epoch_losses: Vec<f64>,
    /// Inputs the defense hook changed.
    pub defended_samples: usize,
}

/// Joint SGD on experts and attention networks for `cfg.epochs` passes.
pub fn local_update(
    model: &mut ClientModel,
    dataset: &ClientDataset,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    hook: Option<&dyn DefenseHook>,
    seed: u64,
) -> Result<LocalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut report = LocalReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    let mut opt = SgdMomentum::new(model.all_vars(), cfg.sgd)?;
    let samples = dataset.samples();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = rng_from(mix(seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            let mut ids = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &samples[i];
                let s = if cfg.augment {
                    augment(s, &cfg.augmentation, &mut rng)
                } else {
                    s.clone()
                };
                ids.push(s.id);
                labels.push(s.label);
                images.push(s.image);
            }
            if let Some(h) = hook {
                let before = images.clone();
                images = h.apply(images, &ids)?;
                report.defended_samples +=
                    images.iter().zip(&before).filter(|(a, b)| a != b).count();
            }
            let x = batch_images(images.iter(), model.dtype(), model.device())?;
            let loss = model.client_loss(&x, &labels, loss_cfg)?;
            total += scalar(&loss.total)?;
            let mean = (loss.total / chunk.len() as f64)?;
            opt.backward_step(&mean)?;
        }
        let mean_loss = total / samples.len() as f64;
        tracing::debug!(client = dataset.client_id(), epoch, loss = mean_loss, "local epoch");
        report.epoch_losses.push(mean_loss);
    }
    Ok(report)
}
