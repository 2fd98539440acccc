//! White-box projected gradient attacks in the L-infinity and L2 threat models.

use candle_core::{DType, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::classifier::{accuracy, Classifier, InputLoss};
use crate::data::{batch_images, Sample};
use crate::error::{Error, Result};
use crate::nn::randn;
use crate::seed::{mix, rng_from, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub norm: Norm,
    pub eps: f64,
    /// Step size.
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            eps: 0.015,
            alpha: 0.007,
            steps: 7,
            random_start: false,
        }
    }
}

impl AttackConfig {
    /// L2 attack with step 0.01, 10 steps, radius 0.1.
    pub fn l2_default() -> Self {
        Self {
            norm: Norm::L2,
            eps: 0.1,
            alpha: 0.01,
            steps: 10,
            random_start: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) || !(self.alpha > 0.0 && self.alpha.is_finite())
        {
            return Err(Error::Config(format!(
                "attack: eps and alpha must be positive (eps={}, alpha={})",
                self.eps, self.alpha
            )));
        }
        Ok(())
    }
}

/// Shape `[B, 1, 1, ...]` matching the rank of `t`, for per-sample broadcasting.
fn per_sample_shape(t: &Tensor) -> Vec<usize> {
    let mut shape = vec![1; t.rank()];
    shape[0] = t.dim(0).unwrap_or(1);
    shape
}

/// Per-sample L2 norms, shaped for broadcasting against `t`.
fn per_sample_l2(t: &Tensor) -> Result<Tensor> {
    let norms = t.flatten_from(1)?.sqr()?.sum_keepdim(1)?.sqrt()?;
    Ok(norms.reshape(per_sample_shape(t))?)
}

/// Nearest point of the `eps`-ball around `center`, then clamped to `[0, 1]`.
pub fn project(cand: &Tensor, center: &Tensor, norm: Norm, eps: f64) -> Result<Tensor> {
    if cand.dims() != center.dims() {
        return Err(Error::Shape(format!(
            "projection of {:?} onto ball around {:?}",
            cand.dims(),
            center.dims()
        )));
    }
    let inside = match norm {
        Norm::Linf => {
            let lo = (center - eps)?;
            let hi = (center + eps)?;
            cand.maximum(&lo)?.minimum(&hi)?
        }
        Norm::L2 => {
            let delta = (cand - center)?;
            let n = per_sample_l2(&delta)?;
            // scale = min(1, eps / n); n = 0 gives scale 1
            let scale = (n.maximum(eps)?.recip()? * eps)?;
            (center + delta.broadcast_mul(&scale)?)?
        }
    };
    Ok(inside.clamp(0.0, 1.0)?)
}

fn check_finite(g: &Tensor, iteration: usize) -> Result<()> {
    let s = g.abs()?.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient { iteration })
    }
}

/// Projected gradient ascent on `loss` starting at `x` (optionally at a
/// random point of the ball).
pub fn pgd(
    loss: &(impl InputLoss + ?Sized),
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    let mut adv = x.clone();
    if cfg.random_start {
        let noise = match cfg.norm {
            Norm::Linf => {
                let n = x.elem_count();
                let u: Vec<f64> = (0..n).map(|_| rng.random_range(-cfg.eps..=cfg.eps)).collect();
                Tensor::from_vec(u, x.dims(), x.device())?.to_dtype(x.dtype())?
            }
            Norm::L2 => {
                let dir = randn(rng, x.dims(), x.dtype(), x.device())?;
                let dir = dir.broadcast_div(&per_sample_l2(&dir)?.maximum(1e-12)?)?;
                let b = x.dim(0)?;
                let radii: Vec<f64> = (0..b).map(|_| cfg.eps * rng.random::<f64>()).collect();
                let radii = Tensor::from_vec(radii, per_sample_shape(x), x.device())?
                    .to_dtype(x.dtype())?;
                dir.broadcast_mul(&radii)?
            }
        };
        adv = project(&(x + noise)?, x, cfg.norm, cfg.eps)?;
    }
    for iteration in 0..cfg.steps {
        let (_, g) = loss.loss_and_grad(&adv, labels)?;
        check_finite(&g, iteration)?;
        let step = match cfg.norm {
            Norm::Linf => g.sign()?,
            Norm::L2 => g.broadcast_div(&per_sample_l2(&g)?.maximum(1e-12)?)?,
        };
        adv = project(&(adv + (step * cfg.alpha)?)?, x, cfg.norm, cfg.eps)?;
    }
    Ok(adv)
}

/// Adversarial versions of `samples`, attacked in batches.
pub fn attack_samples(
    model: &dyn Classifier,
    samples: &[Sample],
    cfg: &AttackConfig,
    batch_size: usize,
    dtype: DType,
    seed: u64,
) -> Result<Vec<Sample>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let device = candle_core::Device::Cpu;
    let mut out = Vec::with_capacity(samples.len());
    for (b, chunk) in samples.chunks(batch_size.max(1)).enumerate() {
        let x = batch_images(chunk.iter().map(|s| &s.image), dtype, &device)?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let mut rng = rng_from(mix(seed, b as u64));
        let adv = pgd(model, &x, &labels, cfg, &mut rng)?;
        for (s, img) in chunk.iter().zip(crate::data::unbatch_images(&adv)?) {
            out.push(Sample {
                id: s.id,
                image: img,
                label: s.label,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackEval {
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
}

/// Clean and adversarial accuracy of a frozen classifier.
pub fn evaluate_attack(
    model: &dyn Classifier,
    samples: &[Sample],
    cfg: &AttackConfig,
    batch_size: usize,
    dtype: DType,
    seed: u64,
) -> Result<AttackEval> {
    let adv = attack_samples(model, samples, cfg, batch_size, dtype, seed)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(AttackEval {
        clean_accuracy: accuracy(&predict_samples(model, samples, batch_size, dtype)?, &truth),
        adversarial_accuracy: accuracy(&predict_samples(model, &adv, batch_size, dtype)?, &truth),
    })
}

pub fn predict_samples(
    model: &dyn Classifier,
    samples: &[Sample],
    batch_size: usize,
    dtype: DType,
) -> Result<Vec<usize>> {
    let device = candle_core::Device::Cpu;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let x = batch_images(chunk.iter().map(|s| &s.image), dtype, &device)?;
        out.extend(model.predict(&x)?);
    }
    Ok(out)
}
