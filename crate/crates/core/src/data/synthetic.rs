//! Procedural shape images used when no real dataset is available.
//!
//! Each image is a smooth two-colour gradient background with one
//! anti-aliased foreground shape; the shape kind is the label (ellipse,
//! cross, triangle, rectangle). The order puts the most separable pair first. Position, size, rotation and colours are
//! random, so the label is carried only by the outline.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Image, Sample};
use crate::error::{Error, Result};
use crate::seed::{rng_from, Rng};

pub const MAX_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub image_size: usize,
    /// Foreground/background contrast range per channel.
    pub min_contrast: f64,
    pub max_contrast: f64,
    /// Shape radius as a fraction of the image side.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Additive i.i.d. Gaussian pixel noise.
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            image_size: 32,
            min_contrast: 0.2,
            max_contrast: 0.45,
            min_radius: 0.22,
            max_radius: 0.36,
            noise_std: 0.0,
        }
    }
}

/// `n` samples with balanced labels (label = index mod classes), seeded.
pub fn generate(cfg: &SyntheticConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    if cfg.classes == 0 || cfg.classes > MAX_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "synthetic classes must be in 1..={MAX_CLASSES}"
        )));
    }
    if cfg.image_size < 8 {
        return Err(Error::InvalidArgument("synthetic image_size must be >= 8".into()));
    }
    let mut rng = rng_from(seed);
    Ok((0..n)
        .map(|i| {
            let label = i % cfg.classes;
            Sample {
                id: i as u64,
                image: render(cfg, label, &mut rng),
                label,
            }
        })
        .collect())
}

fn render(cfg: &SyntheticConfig, label: usize, rng: &mut Rng) -> Image {
    let side = cfg.image_size;
    let s = side as f64;
    let bg_a: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let bg_b: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let grad_angle = rng.random_range(0.0..2.0 * PI);
    let fg: [f64; 3] = std::array::from_fn(|c| {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let mid = 0.5 * (bg_a[c] + bg_b[c]);
        (mid + sign * rng.random_range(cfg.min_contrast..=cfg.max_contrast)).clamp(0.02, 0.98)
    });
    let radius = rng.random_range(cfg.min_radius..=cfg.max_radius) * s;
    let margin = radius * 1.05;
    let cx = rng.random_range(margin.min(s / 2.0)..=(s - margin).max(s / 2.0));
    let cy = rng.random_range(margin.min(s / 2.0)..=(s - margin).max(s / 2.0));
    let rot = rng.random_range(0.0..2.0 * PI);
    let aspect = rng.random_range(0.6..=1.0);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");

    let (gs, gc) = grad_angle.sin_cos();
    let (rs, rc) = rot.sin_cos();
    let mut img = Image::zeros(3, side, side);
    for y in 0..side {
        for x in 0..side {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let g = (((px / s - 0.5) * gc + (py / s - 0.5) * gs) + 0.7) / 1.4;
            let g = g.clamp(0.0, 1.0);
            // shape-local coordinates
            let dx = px - cx;
            let dy = py - cy;
            let u = rc * dx + rs * dy;
            let v = -rs * dx + rc * dy;
            let dist = signed_distance(label, u, v, radius, aspect);
            let cover = (0.5 - dist).clamp(0.0, 1.0);
            for c in 0..3 {
                let bg = bg_a[c] * (1.0 - g) + bg_b[c] * g;
                let mut val = bg * (1.0 - cover) + fg[c] * cover;
                if cfg.noise_std > 0.0 {
                    val += noise.sample(rng);
                }
                *img.at_mut(c, y, x) = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// Approximate signed distance (pixels) to the shape outline; negative inside.
fn signed_distance(label: usize, u: f64, v: f64, r: f64, aspect: f64) -> f64 {
    match label {
        0 => {
            // ellipse
            let (a, b) = (r, r * aspect);
            let k = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
            (k - 1.0) * b
        }
        1 => {
            // plus sign: union of two bars
            let w = r * 0.3;
            let h_bar = (u.abs() - r).max(v.abs() - w);
            let v_bar = (u.abs() - w).max(v.abs() - r);
            h_bar.min(v_bar)
        }
        2 => {
            // equilateral triangle inscribed in radius r
            (0..3)
                .map(|k| {
                    let th = 2.0 * PI * k as f64 / 3.0 + PI / 2.0;
                    u * th.cos() + v * th.sin() - r * 0.5
                })
                .fold(f64::NEG_INFINITY, f64::max)
        }
        _ => {
            // rectangle with half-sides r*0.85, r*0.85*aspect
            let (a, b) = (r * 0.85, r * 0.85 * aspect);
            (u.abs() - a).max(v.abs() - b)
        }
    }
}
