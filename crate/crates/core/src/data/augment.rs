use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Image, Sample};
use crate::seed::Rng;

/// Training-time augmentation: random rotation, horizontal flip and
/// brightness shift, each applied independently with its own probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotate_prob: f64,
    pub max_rotation_deg: f64,
    pub flip_prob: f64,
    pub brightness_prob: f64,
    pub max_brightness: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate_prob: 0.5,
            max_rotation_deg: 15.0,
            flip_prob: 0.5,
            brightness_prob: 0.5,
            max_brightness: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            rotate_prob: 0.0,
            flip_prob: 0.0,
            brightness_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Draws one augmentation. Always consumes the same number of values from
/// `rng`, so streams stay aligned whatever the outcome.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut Rng) -> Sample {
    let do_rotate = rng.random::<f64>() < cfg.rotate_prob;
    let angle = rng.random_range(-1.0..=1.0) * cfg.max_rotation_deg;
    let do_flip = rng.random::<f64>() < cfg.flip_prob;
    let do_bright = rng.random::<f64>() < cfg.brightness_prob;
    let delta = rng.random_range(-1.0..=1.0) * cfg.max_brightness;

    let mut image = sample.image.clone();
    if do_rotate && angle != 0.0 {
        image = rotate(&image, angle);
    }
    if do_flip {
        image = hflip(&image);
    }
    if do_bright {
        image = adjust_brightness(&image, delta as f32);
    }
    Sample {
        id: sample.id,
        image,
        label: sample.label,
    }
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                *out.at_mut(c, y, x) = img.at(c, y, img.width - 1 - x);
            }
        }
    }
    out
}

/// Adds `delta` to every pixel and clamps to `[0, 1]`.
pub fn adjust_brightness(img: &Image, delta: f32) -> Image {
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        *v = (*v + delta).clamp(0.0, 1.0);
    }
    out
}

/// Rotation about the image centre with bilinear sampling; coordinates
/// falling outside the image read the nearest border pixel.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    let max_y = img.height as f64 - 1.0;
    let max_x = img.width as f64 - 1.0;
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            // inverse map: source = R(-theta) * dest
            let sx = (cos * dx + sin * dy + cx).clamp(0.0, max_x);
            let sy = (-sin * dx + cos * dy + cy).clamp(0.0, max_y);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let y1 = (y0 + 1).min(img.height - 1);
            let fx = (sx - x0 as f64) as f32;
            let fy = (sy - y0 as f64) as f32;
            for c in 0..img.channels {
                let top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
                let bot = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
                *out.at_mut(c, y, x) = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
            }
        }
    }
    out
}
