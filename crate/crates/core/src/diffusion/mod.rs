//! Denoising diffusion purifier.
//!
//! A noise-prediction network is trained on benign images with the usual
//! denoising objective. At inference a suspicious input is diffused forward
//! to a depth `t*` in closed form and then denoised step by step back to
//! `t = 0`, which washes out small structured perturbations. The network
//! works on images rescaled to `[-1, 1]`; inputs and outputs of [`purify`]
//! are in `[0, 1]`.

mod unet;

pub use unet::UNet;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{batch_images, Sample};
use crate::error::{Error, Result};
use crate::mae::Calibration;
use crate::nn::{randn, scalar};
use crate::seed::{mix, rng_from, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta1: f64,
    #[serde(rename = "betaT")]
    pub beta_t: f64,
    /// Channel width of every level.
    pub channels: usize,
    /// Number of down (and up) blocks.
    pub levels: usize,
    pub time_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta1: 1e-4,
            beta_t: 0.02,
            channels: 64,
            levels: 3,
            time_dim: 64,
            epochs: 50,
            batch_size: 64,
            lr: 2e-4,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        NoiseSchedule::new(self.steps, self.beta1, self.beta_t)
            .map_err(|e| Error::Config(format!("diffusion: {e}")))?;
        if self.channels == 0 || self.time_dim == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(
                "diffusion: channels, time_dim, batch_size and lr must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.beta1, self.beta_t)
    }
}

/// Variance of the reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `sigma_t^2 = beta_t`.
    Beta,
    /// `sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    Posterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PurifyConfig {
    pub t_min: usize,
    pub t_max: usize,
    pub sigma_mode: SigmaMode,
}

impl Default for PurifyConfig {
    fn default() -> Self {
        Self {
            t_min: 10,
            t_max: 50,
            sigma_mode: SigmaMode::Beta,
        }
    }
}

impl PurifyConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(1 <= self.t_min && self.t_min <= self.t_max && self.t_max <= steps) {
            return Err(Error::Config(format!(
                "purify: need 1 <= t_min ({}) <= t_max ({}) <= T ({steps})",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }
}

/// Linear beta schedule; index `t` runs over `1..=T`, with `abar_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta1: f64, beta_t: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta1 && beta1 < beta_t && beta_t < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs T >= 2 and 0 < beta1 < betaT < 1 (T={steps}, beta1={beta1}, betaT={beta_t})"
            )));
        }
        let mut betas = vec![0.0];
        let mut alpha_bars = vec![1.0];
        for t in 1..=steps {
            let b = beta1 + (t - 1) as f64 / (steps - 1) as f64 * (beta_t - beta1);
            betas.push(b);
            alpha_bars.push(alpha_bars[t - 1] * (1.0 - b));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn sigma(&self, t: usize, mode: SigmaMode) -> f64 {
        match mode {
            SigmaMode::Beta => self.beta(t).sqrt(),
            SigmaMode::Posterior => {
                ((1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)).sqrt()
            }
        }
    }

    fn check(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.steps() || (!allow_zero && t == 0) {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

/// Raw sinusoidal encoding: component `i` is `sin(t / 10000^(2i/d))` for
/// even `i` and `cos(t / 10000^((2i-1)/d))` for odd `i`.
pub fn sincos_embedding(t: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            if i % 2 == 0 {
                (t / 10000f64.powf(2.0 * i as f64 / dim as f64)).sin()
            } else {
                (t / 10000f64.powf((2.0 * i as f64 - 1.0) / dim as f64)).cos()
            }
        })
        .collect()
}

/// Network estimating the noise in `x_t`.
pub trait NoisePredictor: Send + Sync {
    /// `t` holds one timestep per batch element.
    fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor>;
}

fn per_sample(values: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1; like.rank()];
    shape[0] = values.len();
    Ok(Tensor::from_vec(values, shape, like.device())?.to_dtype(like.dtype())?)
}

/// `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) noise`, one `t` per sample.
pub fn q_sample(x0: &Tensor, t: &[usize], noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if t.len() != x0.dim(0)? || noise.dims() != x0.dims() {
        return Err(Error::Shape(format!(
            "q_sample: {:?} with {} timesteps and noise {:?}",
            x0.dims(),
            t.len(),
            noise.dims()
        )));
    }
    for &ti in t {
        schedule.check(ti, true)?;
    }
    let a = per_sample(t.iter().map(|&ti| schedule.alpha_bar(ti).sqrt()).collect(), x0)?;
    let s = per_sample(t.iter().map(|&ti| (1.0 - schedule.alpha_bar(ti)).sqrt()).collect(), x0)?;
    Ok((x0.broadcast_mul(&a)? + noise.broadcast_mul(&s)?)?)
}

/// Posterior mean `(x_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t)`.
pub fn denoise_mean(x_t: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check(t, false)?;
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    Ok(((x_t - (eps * coef)?)? / schedule.alpha(t).sqrt())?)
}

fn noise_for(x: &Tensor, rngs: &mut [Rng]) -> Result<Tensor> {
    let dims = x.dims();
    let parts = rngs
        .iter_mut()
        .map(|r| randn(r, &dims[1..], x.dtype(), x.device()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&parts, 0)?)
}

/// One reverse step from `t` to `t - 1`. Returns the mean exactly at `t = 1`.
/// `rngs` holds one stream per batch element.
pub fn denoise_step(
    model: &dyn NoisePredictor,
    x_t: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    mode: SigmaMode,
    rngs: &mut [Rng],
) -> Result<Tensor> {
    schedule.check(t, false)?;
    let b = x_t.dim(0)?;
    if rngs.len() != b {
        return Err(Error::Shape(format!("{} rng streams for batch of {b}", rngs.len())));
    }
    let eps = model.predict_noise(x_t, &vec![t; b])?.to_dtype(x_t.dtype())?;
    let mean = denoise_mean(x_t, &eps, t, schedule)?;
    if t == 1 {
        return Ok(mean);
    }
    let z = noise_for(x_t, rngs)?;
    Ok((mean + (z * schedule.sigma(t, mode))?)?)
}

/// Diffuse `x` (in `[0, 1]`) forward to `t_star`, denoise back to 0, clamp.
/// `t_star = 0` returns the input unchanged.
pub fn purify(
    model: &dyn NoisePredictor,
    x: &Tensor,
    t_star: usize,
    schedule: &NoiseSchedule,
    mode: SigmaMode,
    rngs: &mut [Rng],
) -> Result<Tensor> {
    schedule.check(t_star, true)?;
    if t_star == 0 {
        return Ok(x.clone());
    }
    let b = x.dim(0)?;
    if rngs.len() != b {
        return Err(Error::Shape(format!("{} rng streams for batch of {b}", rngs.len())));
    }
    let x0 = x.affine(2.0, -1.0)?;
    let noise = noise_for(&x0, rngs)?;
    let mut h = q_sample(&x0, &vec![t_star; b], &noise, schedule)?;
    for t in (1..=t_star).rev() {
        h = denoise_step(model, &h, t, schedule, mode, rngs)?;
    }
    Ok(h.affine(0.5, 0.5)?.clamp(0.0, 1.0)?)
}

/// Rank-linear map from detection score to purification depth: `q` is the
/// piecewise-linear empirical CDF of the calibration scores above `tau`
/// (0 at `tau`, `j/m` at the `j`-th tail score), and
/// `t* = round(t_min + (t_max - t_min) q)`.
pub fn adaptive_depth(score: f64, calibration: &Calibration, policy: &PurifyConfig) -> Result<usize> {
    if calibration.sorted_scores.is_empty() || calibration.tau.is_nan() {
        return Err(Error::Uncalibrated);
    }
    let q = tail_rank(score, calibration.tau, calibration.upper_tail());
    let span = (policy.t_max - policy.t_min) as f64;
    Ok((policy.t_min as f64 + span * q.clamp(0.0, 1.0)).round() as usize)
}

fn tail_rank(score: f64, tau: f64, tail: &[f64]) -> f64 {
    let m = tail.len();
    if score <= tau {
        return 0.0;
    }
    if m == 0 || score >= tail[m - 1] {
        return 1.0;
    }
    // first knot strictly above the score
    let j = tail.partition_point(|&a| a <= score);
    let (x0, y0) = if j == 0 { (tau, 0.0) } else { (tail[j - 1], j as f64 / m as f64) };
    let (x1, y1) = (tail[j], (j + 1) as f64 / m as f64);
    if !x0.is_finite() || x1 <= x0 {
        return y0;
    }
    y0 + (score - x0) / (x1 - x0) * (y1 - y0)
}

/// Noise-prediction objective `mean |noise - eps(x_t, t)|^2`.
pub fn diffusion_loss(
    model: &dyn NoisePredictor,
    x0: &Tensor,
    t: &[usize],
    noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let x_t = q_sample(x0, t, noise, schedule)?;
    let eps = model.predict_noise(&x_t, t)?;
    Ok((noise - eps)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffusionReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Trains on benign samples with `t ~ U{1..T}`.
pub fn train_diffusion(
    model: &UNet,
    samples: &[Sample],
    cfg: &DiffusionConfig,
    seed: u64,
) -> Result<DiffusionReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut report = DiffusionReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    let schedule = cfg.schedule()?;
    let params = ParamsAdamW {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut opt = AdamW::new(model.vars(), params)?;
    let device = candle_core::Device::Cpu;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = rng_from(mix(seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = batch_images(chunk.iter().map(|&i| &samples[i].image), model.dtype(), &device)?
                .affine(2.0, -1.0)?;
            let t: Vec<usize> = (0..chunk.len()).map(|_| rng.random_range(1..=schedule.steps())).collect();
            let noise = randn(&mut rng, x.dims(), x.dtype(), &device)?;
            let loss = diffusion_loss(model, &x, &t, &noise, &schedule)?;
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
        tracing::debug!(epoch, loss = mean, "diffusion epoch");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

/// Noise predictor that always answers zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl NoisePredictor for ZeroNoise {
    fn predict_noise(&self, x_t: &Tensor, _t: &[usize]) -> Result<Tensor> {
        Ok(x_t.zeros_like()?)
    }
}

/// Convenience: per-sample streams derived from `seed` and sample ids.
pub fn sample_rngs(seed: u64, ids: &[u64]) -> Vec<Rng> {
    ids.iter().map(|&id| rng_from(mix(seed, id))).collect()
}
