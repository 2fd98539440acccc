use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_CALIBRATION_SCORES: usize = 20;

/// Threshold `tau` at the `(1 - kappa)` quantile of clean validation scores.
/// A sample is flagged when its score is strictly greater than `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub kappa: f64,
    pub tau: f64,
    /// Clean calibration scores, ascending.
    pub sorted_scores: Vec<f64>,
}

impl Calibration {
    /// Calibration with an explicit threshold (e.g. `+inf` to disable flagging).
    pub fn with_threshold(tau: f64, scores: &[f64]) -> Self {
        let mut sorted_scores = scores.to_vec();
        sorted_scores.sort_by(f64::total_cmp);
        let kappa = if sorted_scores.is_empty() {
            0.0
        } else {
            sorted_scores.iter().filter(|&&s| s > tau).count() as f64 / sorted_scores.len() as f64
        };
        Self {
            kappa,
            tau,
            sorted_scores,
        }
    }

    pub fn is_flagged(&self, score: f64) -> bool {
        score > self.tau
    }

    /// Calibration scores strictly above `tau`, ascending.
    pub fn upper_tail(&self) -> &[f64] {
        let start = self.sorted_scores.partition_point(|&s| s <= self.tau);
        &self.sorted_scores[start..]
    }

    pub fn exceed_count(&self) -> usize {
        self.upper_tail().len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Linear-interpolation quantile between order statistics of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn calibrate_threshold(scores: &[f64], kappa: f64) -> Result<Calibration> {
    if scores.len() < MIN_CALIBRATION_SCORES {
        return Err(Error::InvalidArgument(format!(
            "calibration needs at least {MIN_CALIBRATION_SCORES} scores, got {}",
            scores.len()
        )));
    }
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::InvalidArgument(format!("kappa {kappa} must be in [0, 1)")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("calibration scores must be finite".into()));
    }
    let mut sorted_scores = scores.to_vec();
    sorted_scores.sort_by(f64::total_cmp);
    let tau = quantile_sorted(&sorted_scores, 1.0 - kappa);
    Ok(Calibration {
        kappa,
        tau,
        sorted_scores,
    })
}
