use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, Var};
use candle_nn::{GroupNorm, Linear, VarMap};
use serde::{Deserialize, Serialize};

use super::{sincos_embedding, DiffusionConfig, NoisePredictor};
use crate::error::{Error, Result};
use crate::nn::{conv2d, group_norm, linear, load_tensors, save_varmap, sorted_vars, Conv2d, ParamBuilder};

/// conv3x3 -> GN (+ per-channel time shift) -> SiLU, twice, with a residual.
#[derive(Debug, Clone)]
struct DoubleConv {
    conv1: Conv2d,
    gn1: GroupNorm,
    t1: Linear,
    conv2: Conv2d,
    gn2: GroupNorm,
    t2: Linear,
    skip: Option<Conv2d>,
}

impl DoubleConv {
    fn new(pb: &ParamBuilder, cin: usize, cout: usize, tdim: usize) -> Result<Self> {
        Ok(Self {
            conv1: conv2d(&pb.pp("conv1"), cin, cout, 3, 1, 1)?,
            gn1: group_norm(&pb.pp("gn1"), cout)?,
            t1: linear(&pb.pp("temb1"), tdim, cout)?,
            conv2: conv2d(&pb.pp("conv2"), cout, cout, 3, 1, 1)?,
            gn2: group_norm(&pb.pp("gn2"), cout)?,
            t2: linear(&pb.pp("temb2"), tdim, cout)?,
            skip: if cin != cout {
                Some(conv2d(&pb.pp("skip"), cin, cout, 1, 1, 0)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> candle_core::Result<Tensor> {
        let shift = |l: &Linear| -> candle_core::Result<Tensor> { l.forward(temb)?.unsqueeze(2)?.unsqueeze(3) };
        let h = self.gn1.forward(&self.conv1.forward(x)?)?.broadcast_add(&shift(&self.t1)?)?.silu()?;
        let h = self.gn2.forward(&self.conv2.forward(&h)?)?.broadcast_add(&shift(&self.t2)?)?.silu()?;
        let r = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        h + r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct UNetManifest {
    config: DiffusionConfig,
    in_channels: usize,
}

/// Encoder/decoder noise predictor with skip connections. Every level keeps
/// the same channel width; resolution halves on the way down (average
/// pooling) and doubles on the way up (nearest upsampling).
pub struct UNet {
    cfg: DiffusionConfig,
    in_channels: usize,
    time_in: Linear,
    time_mlp1: Linear,
    time_mlp2: Linear,
    stem: Conv2d,
    down: Vec<DoubleConv>,
    mid: DoubleConv,
    up: Vec<DoubleConv>,
    head: Conv2d,
    params: VarMap,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for UNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UNet")
            .field("cfg", &self.cfg)
            .field("in_channels", &self.in_channels)
            .finish_non_exhaustive()
    }
}

impl UNet {
    pub fn new(cfg: &DiffusionConfig, in_channels: usize, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(cfg, in_channels, ParamBuilder::random(seed, dtype, &Device::Cpu))
    }

    fn build(cfg: &DiffusionConfig, in_channels: usize, pb: ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let td = cfg.time_dim;
        Ok(Self {
            cfg: *cfg,
            in_channels,
            time_in: linear(&pb.pp("time.in"), td, td)?,
            time_mlp1: linear(&pb.pp("time.mlp1"), td, td)?,
            time_mlp2: linear(&pb.pp("time.mlp2"), td, td)?,
            stem: conv2d(&pb.pp("stem"), in_channels, c, 3, 1, 1)?,
            down: (0..cfg.levels)
                .map(|i| DoubleConv::new(&pb.pp(format!("down{i}")), c, c, td))
                .collect::<Result<_>>()?,
            mid: DoubleConv::new(&pb.pp("mid"), c, c, td)?,
            up: (0..cfg.levels)
                .map(|i| DoubleConv::new(&pb.pp(format!("up{i}")), 2 * c, c, td))
                .collect::<Result<_>>()?,
            head: conv2d(&pb.pp("head"), c, in_channels, 1, 1, 0)?,
            dtype: pb.dtype(),
            device: pb.device(),
            params: pb.varmap(),
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn vars(&self) -> Vec<Var> {
        sorted_vars(&[&self.params])
    }

    pub fn varmap(&self) -> &VarMap {
        &self.params
    }

    /// `MLP(SiLU(Linear(SinCos(t))))`, shape `(B, time_dim)`.
    pub fn time_embed(&self, t: &[usize]) -> Result<Tensor> {
        let td = self.cfg.time_dim;
        let raw: Vec<f64> = t.iter().flat_map(|&t| sincos_embedding(t as f64, td)).collect();
        let raw = Tensor::from_vec(raw, (t.len(), td), &self.device)?.to_dtype(self.dtype)?;
        let h = self.time_in.forward(&raw)?.silu()?;
        Ok(self.time_mlp2.forward(&self.time_mlp1.forward(&h)?.silu()?)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_varmap(&self.params, &dir.join("unet.safetensors"))?;
        let m = UNetManifest {
            config: self.cfg,
            in_channels: self.in_channels,
        };
        let path = dir.join("unet.json");
        fs::write(&path, serde_json::to_vec_pretty(&m)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, dtype: DType) -> Result<Self> {
        let path = dir.join("unet.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: UNetManifest = serde_json::from_slice(&bytes)?;
        let tensors = load_tensors(&dir.join("unet.safetensors"))?;
        Self::build(&m.config, m.in_channels, ParamBuilder::copying(tensors, dtype, &Device::Cpu))
    }
}

impl NoisePredictor for UNet {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        let (b, c, h, w) = x_t.dims4()?;
        let scale = 1usize << self.cfg.levels;
        if c != self.in_channels || h % scale != 0 || w % scale != 0 || t.len() != b {
            return Err(Error::Shape(format!(
                "noise predictor got {:?} with {} timesteps (needs {} channels, sides divisible by {scale})",
                x_t.dims(),
                t.len(),
                self.in_channels
            )));
        }
        let x_t = x_t.to_dtype(self.dtype)?;
        let temb = self.time_embed(t)?;
        let mut hcur = self.stem.forward(&x_t)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for blk in &self.down {
            hcur = blk.forward(&hcur, &temb)?;
            skips.push(hcur.clone());
            hcur = hcur.avg_pool2d(2)?;
        }
        hcur = self.mid.forward(&hcur, &temb)?;
        for blk in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let (_, _, sh, sw) = skip.dims4()?;
            hcur = hcur.upsample_nearest2d(sh, sw)?;
            hcur = blk.forward(&Tensor::cat(&[&hcur, &skip], 1)?, &temb)?;
        }
        Ok(self.head.forward(&hcur)?)
    }
}
