//! Per-client mixture-of-experts classifier.
//!
//! Each client holds `K` experts (residual backbone + two-layer head) and `K`
//! attention scorers. The scorers read a shared feature vector `psi(x)` and
//! their softmax gives the mixing weights over the experts' class
//! probabilities. Expert parameters are federated; attention parameters stay
//! on the client.

mod backbone;
mod model;
mod train;

pub use backbone::{Backbone, BackboneKind};
pub use model::{entropy, softmax_rows, ClientModel, LossBreakdown, MoeOutput};
pub use train::{local_update, DefenseHook, LocalReport, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the attention scorers get `psi(x)` from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Reuse the first expert's backbone output.
    FirstExpert,
    /// A separate, client-local backbone dedicated to routing.
    ExtraBackbone,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    #[serde(rename = "K")]
    pub num_experts: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub backbone: BackboneKind,
    /// Channels of the first backbone stage; later stages double it.
    pub width: usize,
    pub stem_stride: usize,
    pub feature_dim: usize,
    pub head_hidden: usize,
    pub attention_hidden: usize,
    pub feature_source: FeatureSource,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            num_experts: 3,
            num_classes: 2,
            in_channels: 3,
            backbone: BackboneKind::Small,
            width: 16,
            stem_stride: 1,
            feature_dim: 128,
            head_hidden: 256,
            attention_hidden: 64,
            feature_source: FeatureSource::FirstExpert,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.num_experts < 1 {
            return bad("K must be at least 1");
        }
        if self.feature_dim < 1 {
            return bad("feature_dim must be at least 1");
        }
        if self.num_classes < 1 || self.in_channels < 1 {
            return bad("num_classes and in_channels must be positive");
        }
        if self.width < 1 || self.head_hidden < 1 || self.attention_hidden < 1 {
            return bad("layer widths must be positive");
        }
        if self.stem_stride < 1 {
            return bad("stem_stride must be at least 1");
        }
        Ok(())
    }
}

/// Weights of the attention regularizers in the client objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// L2 weight on the attention parameters.
    pub beta: f64,
    /// Weight on the routing entropy; added with the sign given.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 1e-4,
            gamma: 0.01,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!(
                "loss: beta must be >= 0 and gamma finite (beta={}, gamma={})",
                self.beta, self.gamma
            )));
        }
        Ok(())
    }
}
