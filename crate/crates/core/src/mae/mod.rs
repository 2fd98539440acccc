//! Masked-autoencoder detector.
//!
//! A ViT-style autoencoder is trained on benign images to reconstruct masked
//! patches. Inputs off the data manifold reconstruct poorly, so the mean
//! per-patch reconstruction error serves as a detection score; a threshold is
//! calibrated as a quantile of scores on clean validation data.

mod calibrate;
mod vit;

pub use calibrate::{calibrate_threshold, Calibration, MIN_CALIBRATION_SCORES};
pub use vit::MaeModel;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{batch_images, Image, Sample};
use crate::error::{Error, Result};
use crate::nn::scalar;
use crate::seed::{mix, rng_from, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    pub patch_size: usize,
    pub mask_ratio: f64,
    /// Token width shared by encoder and decoder.
    pub dim: usize,
    pub depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            mask_ratio: 0.75,
            dim: 192,
            depth: 4,
            decoder_depth: 2,
            heads: 4,
            mlp_ratio: 4,
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.05,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("mae: {m}")));
        if self.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio {} must be in (0, 1)", self.mask_ratio));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if !self.dim.is_multiple_of(2) {
            return bad("dim must be even for sinusoidal positions".into());
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || self.mlp_ratio == 0 {
            return bad("batch_size, lr and mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

/// How the detection score treats masking at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Mask as in training and average over several draws.
    Masked,
    /// Feed every patch to the encoder; one deterministic pass.
    Unmasked,
}

/// `(B, C, H, W)` -> `(B, P, p*p*C)`; patches in row-major order, each
/// flattened as `(row, col, channel)`.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("{h}x{w} image is not divisible into {p}x{p} patches")));
    }
    let (gh, gw) = (h / p, w / p);
    Ok(x.reshape((b, c, gh, p, gw, p))?
        .permute((0, 2, 4, 3, 5, 1))?
        .reshape((b, gh * gw, p * p * c))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, p: usize, c: usize, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, d) = patches.dims3()?;
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) || n != (h / p) * (w / p) || d != p * p * c {
        return Err(Error::Shape(format!(
            "cannot fold {:?} into ({c}, {h}, {w}) with patch {p}",
            patches.dims()
        )));
    }
    let (gh, gw) = (h / p, w / p);
    Ok(patches
        .reshape((b, gh, gw, p, p, c))?
        .permute((0, 5, 1, 3, 2, 4))?
        .reshape((b, c, h, w))?)
}

/// Which patches are hidden from the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub masked: Vec<bool>,
}

impl Mask {
    /// Nothing masked.
    pub fn none(num_patches: usize) -> Self {
        Self {
            masked: vec![false; num_patches],
        }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn num_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn visible(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn hidden(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.masked[i]).collect()
    }
}

/// Number of masked patches: `ceil(r P)`.
pub fn masked_count(num_patches: usize, ratio: f64) -> usize {
    // the epsilon keeps exact products such as 0.75 * 64 from rounding up
    ((ratio * num_patches as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Exactly `ceil(r P)` patches masked, chosen uniformly without replacement.
pub fn sample_mask(num_patches: usize, ratio: f64, rng: &mut Rng) -> Result<Mask> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} must be in (0, 1)")));
    }
    let k = masked_count(num_patches, ratio);
    if k == 0 || k >= num_patches {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {ratio} masks {k} of {num_patches} patches"
        )));
    }
    let mut masked = vec![false; num_patches];
    for i in rand::seq::index::sample(rng, num_patches, k) {
        masked[i] = true;
    }
    Ok(Mask { masked })
}

fn mask_weights(masks: &[Mask], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let p = masks[0].len();
    let w: Vec<f32> = masks
        .iter()
        .flat_map(|m| m.masked.iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(w, (masks.len(), p), device)?.to_dtype(dtype)?)
}

/// Mean over masked patches of the squared patch error `|x_p - xhat_p|^2`.
/// Both inputs are patch tensors `(B, P, p*p*C)`.
pub fn mae_loss(target: &Tensor, recon: &Tensor, masks: &[Mask]) -> Result<Tensor> {
    if target.dims() != recon.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", target.dims(), recon.dims())));
    }
    let (b, p, _) = target.dims3()?;
    if masks.len() != b || masks.iter().any(|m| m.len() != p) {
        return Err(Error::Shape(format!("{} masks for a ({b}, {p}) patch batch", masks.len())));
    }
    let count: usize = masks.iter().map(Mask::num_masked).sum();
    if count == 0 {
        return Err(Error::InvalidArgument("no masked patches to score".into()));
    }
    let per_patch = (target - recon)?.sqr()?.sum(2)?;
    let w = mask_weights(masks, per_patch.dtype(), per_patch.device())?;
    Ok(((per_patch * w)?.sum_all()? / count as f64)?)
}

/// Per-sample mean over all patches of `|x_p - xhat_p|^2`.
fn all_patch_error(target: &Tensor, recon: &Tensor) -> Result<Vec<f64>> {
    let e = (target - recon)?.sqr()?.sum(2)?.mean(1)?;
    Ok(e.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaeReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Trains on benign samples with AdamW, drawing fresh masks every batch.
pub fn train_mae(
    mae: &MaeModel,
    samples: &[Sample],
    cfg: &MaeConfig,
    seed: u64,
) -> Result<MaeReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut report = MaeReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    let params = ParamsAdamW {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut opt = AdamW::new(mae.vars(), params)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = rng_from(mix(seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = batch_images(chunk.iter().map(|&i| &samples[i].image), mae.dtype(), mae.device())?;
            let masks = (0..chunk.len())
                .map(|_| sample_mask(mae.num_patches(), cfg.mask_ratio, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let target = patchify(&x, mae.patch_size())?;
            let recon = mae.reconstruct_patches(&x, &masks)?;
            let loss = mae_loss(&target, &recon, &masks)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { index: 0 });
            }
            if epoch == 0 && total == 0.0 {
                report.initial_loss = value;
            }
            total += value * chunk.len() as f64;
            opt.backward_step(&loss)?;
        }
        let mean = total / samples.len() as f64;
        tracing::debug!(epoch, loss = mean, "mae epoch");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

/// Detection scores for a batch. In masked mode the score of sample `i` is
/// the mean over `n_draws` masks (seeded by `mix(seed, ids[i])`) of the
/// all-patch reconstruction error, so it does not depend on batch layout.
pub fn detection_scores(
    mae: &MaeModel,
    images: &[&Image],
    ids: &[u64],
    mask_ratio: f64,
    n_draws: usize,
    mode: ScoreMode,
    seed: u64,
) -> Result<Vec<f64>> {
    if images.len() != ids.len() {
        return Err(Error::Shape(format!("{} images, {} ids", images.len(), ids.len())));
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let x = batch_images(images.iter().copied(), mae.dtype(), mae.device())?;
    let target = patchify(&x, mae.patch_size())?;
    let p = mae.num_patches();
    match mode {
        ScoreMode::Unmasked => {
            let masks = vec![Mask::none(p); images.len()];
            all_patch_error(&target, &mae.reconstruct_patches(&x, &masks)?)
        }
        ScoreMode::Masked => {
            let draws = n_draws.max(1);
            let mut rngs: Vec<Rng> = ids.iter().map(|&id| rng_from(mix(seed, id))).collect();
            let mut acc = vec![0.0; images.len()];
            for _ in 0..draws {
                let masks = rngs
                    .iter_mut()
                    .map(|r| sample_mask(p, mask_ratio, r))
                    .collect::<Result<Vec<_>>>()?;
                let err = all_patch_error(&target, &mae.reconstruct_patches(&x, &masks)?)?;
                for (a, e) in acc.iter_mut().zip(err) {
                    *a += e;
                }
            }
            Ok(acc.into_iter().map(|a| a / draws as f64).collect())
        }
    }
}

/// Scores a sample collection in batches.
pub fn score_samples(
    mae: &MaeModel,
    samples: &[Sample],
    mask_ratio: f64,
    n_draws: usize,
    mode: ScoreMode,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let ids: Vec<u64> = chunk.iter().map(|s| s.id).collect();
        out.extend(detection_scores(mae, &images, &ids, mask_ratio, n_draws, mode, seed)?);
    }
    Ok(out)
}
