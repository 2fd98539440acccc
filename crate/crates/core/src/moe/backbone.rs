use candle_core::{Module, Tensor};
use candle_nn::{GroupNorm, Linear};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{conv2d, group_norm, linear, Conv2d, ParamBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// One residual block per stage.
    Small,
    /// Two residual blocks per stage (the 18-layer layout).
    Resnet18,
}

impl BackboneKind {
    fn blocks_per_stage(self) -> [usize; 4] {
        match self {
            BackboneKind::Small => [1, 1, 1, 1],
            BackboneKind::Resnet18 => [2, 2, 2, 2],
        }
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

impl ResidualBlock {
    fn new(pb: &ParamBuilder, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some((
                conv2d(&pb.pp("down"), in_ch, out_ch, 1, stride, 0)?,
                group_norm(&pb.pp("down_gn"), out_ch)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: conv2d(&pb.pp("conv1"), in_ch, out_ch, 3, stride, 1)?,
            gn1: group_norm(&pb.pp("gn1"), out_ch)?,
            conv2: conv2d(&pb.pp("conv2"), out_ch, out_ch, 3, 1, 1)?,
            gn2: group_norm(&pb.pp("gn2"), out_ch)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.gn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.gn2.forward(&self.conv2.forward(&h)?)?;
        let skip = match &self.shortcut {
            Some((conv, gn)) => gn.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        (h + skip)?.relu()
    }
}

/// Residual convolutional feature extractor producing `psi(x)` in `R^d`.
#[derive(Debug, Clone)]
pub struct Backbone {
    stem: Conv2d,
    stem_gn: GroupNorm,
    blocks: Vec<ResidualBlock>,
    proj: Linear,
}

impl Backbone {
    pub fn new(
        pb: &ParamBuilder,
        kind: BackboneKind,
        in_channels: usize,
        width: usize,
        stem_stride: usize,
        feature_dim: usize,
    ) -> Result<Self> {
        let stem = conv2d(&pb.pp("stem"), in_channels, width, 3, stem_stride, 1)?;
        let stem_gn = group_norm(&pb.pp("stem_gn"), width)?;
        let mut blocks = Vec::new();
        let mut ch = width;
        for (stage, &n) in kind.blocks_per_stage().iter().enumerate() {
            let out = width << stage;
            for b in 0..n {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(ResidualBlock::new(
                    &pb.pp(format!("stage{stage}.{b}")),
                    ch,
                    out,
                    stride,
                )?);
                ch = out;
            }
        }
        let proj = linear(&pb.pp("proj"), ch, feature_dim)?;
        Ok(Self {
            stem,
            stem_gn,
            blocks,
            proj,
        })
    }

    /// `(B, C, H, W)` -> `(B, d)`.
    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = self.stem_gn.forward(&self.stem.forward(x)?)?.relu()?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        let pooled = h.mean((2, 3))?;
        self.proj.forward(&pooled)
    }
}
