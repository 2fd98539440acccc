use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Linear, VarMap};
use serde::{Deserialize, Serialize};

use super::{patchify, unpatchify, Mask, MaeConfig};
use crate::error::{Error, Result};
use crate::nn::{linear, load_tensors, save_varmap, sorted_vars, Init, LayerNorm, ParamBuilder};

#[derive(Debug, Clone)]
struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.proj.forward(&out)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(pb: &ParamBuilder, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&pb.pp("ln1"), dim)?,
            attn: Attention {
                qkv: linear(&pb.pp("attn.qkv"), dim, 3 * dim)?,
                proj: linear(&pb.pp("attn.proj"), dim, dim)?,
                heads,
            },
            ln2: LayerNorm::new(&pb.pp("ln2"), dim)?,
            fc1: linear(&pb.pp("mlp.fc1"), dim, mlp_ratio * dim)?,
            fc2: linear(&pb.pp("mlp.fc2"), mlp_ratio * dim, dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.gelu_erf()?)?;
        x + h
    }
}

/// Fixed 1-D sinusoidal table `(P, D)`.
fn sinusoidal_positions(n: usize, dim: usize) -> Vec<f32> {
    let mut out = vec![0f32; n * dim];
    for pos in 0..n {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let a = pos as f64 * freq;
            out[pos * dim + 2 * i] = a.sin() as f32;
            out[pos * dim + 2 * i + 1] = a.cos() as f32;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct MaeManifest {
    config: MaeConfig,
    in_channels: usize,
    image_size: usize,
}

/// Vision-transformer masked autoencoder. The encoder only ever receives the
/// visible patches; the decoder fills the hidden positions with a learned
/// mask token and predicts pixels for every patch.
pub struct MaeModel {
    cfg: MaeConfig,
    in_channels: usize,
    image_size: usize,
    embed: Linear,
    encoder: Vec<Block>,
    enc_norm: LayerNorm,
    dec_embed: Linear,
    mask_token: Tensor,
    decoder: Vec<Block>,
    dec_norm: LayerNorm,
    pred: Linear,
    pos: Tensor,
    params: VarMap,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for MaeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MaeModel")
            .field("cfg", &self.cfg)
            .field("in_channels", &self.in_channels)
            .field("image_size", &self.image_size)
            .finish_non_exhaustive()
    }
}

impl MaeModel {
    pub fn new(
        cfg: &MaeConfig,
        in_channels: usize,
        image_size: usize,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        Self::build(cfg, in_channels, image_size, ParamBuilder::random(seed, dtype, &Device::Cpu))
    }

    fn build(cfg: &MaeConfig, in_channels: usize, image_size: usize, pb: ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        if !image_size.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "mae: image size {image_size} not divisible by patch size {p}"
            )));
        }
        let n = (image_size / p).pow(2);
        let patch_dim = p * p * in_channels;
        let d = cfg.dim;
        let blocks = |name: &str, depth: usize| {
            (0..depth)
                .map(|i| Block::new(&pb.pp(format!("{name}.{i}")), d, cfg.heads, cfg.mlp_ratio))
                .collect::<Result<Vec<_>>>()
        };
        let device = pb.device();
        let dtype = pb.dtype();
        Ok(Self {
            cfg: *cfg,
            in_channels,
            image_size,
            embed: linear(&pb.pp("embed"), patch_dim, d)?,
            encoder: blocks("encoder", cfg.depth)?,
            enc_norm: LayerNorm::new(&pb.pp("enc_norm"), d)?,
            dec_embed: linear(&pb.pp("dec_embed"), d, d)?,
            mask_token: pb.get(&[1, 1, d], "mask_token", Init::Normal { std: 0.02 })?,
            decoder: blocks("decoder", cfg.decoder_depth)?,
            dec_norm: LayerNorm::new(&pb.pp("dec_norm"), d)?,
            pred: linear(&pb.pp("pred"), d, patch_dim)?,
            pos: Tensor::from_vec(sinusoidal_positions(n, d), (1, n, d), &device)?.to_dtype(dtype)?,
            params: pb.varmap(),
            dtype,
            device,
        })
    }

    pub fn config(&self) -> &MaeConfig {
        &self.cfg
    }

    pub fn patch_size(&self) -> usize {
        self.cfg.patch_size
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.cfg.patch_size).pow(2)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> Vec<Var> {
        sorted_vars(&[&self.params])
    }

    pub fn varmap(&self) -> &VarMap {
        &self.params
    }

    fn gather_tokens(x: &Tensor, idx: &[Vec<u32>]) -> Result<Tensor> {
        let (b, _, d) = x.dims3()?;
        let k = idx[0].len();
        let flat: Vec<u32> = idx.iter().flatten().copied().collect();
        let index = Tensor::from_vec(flat, (b, k, 1), x.device())?
            .broadcast_as((b, k, d))?
            .contiguous()?;
        Ok(x.contiguous()?.gather(&index, 1)?)
    }

    /// Predicted patches `(B, P, p*p*C)` for inputs `(B, C, H, W)`.
    pub fn reconstruct_patches(&self, x: &Tensor, masks: &[Mask]) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels || h != self.image_size || w != self.image_size {
            return Err(Error::Shape(format!(
                "detector expects ({}, {s}, {s}) inputs, got {:?}",
                self.in_channels,
                x.dims(),
                s = self.image_size
            )));
        }
        let n = self.num_patches();
        if masks.len() != b || masks.iter().any(|m| m.len() != n) {
            return Err(Error::Shape(format!("{} masks for {b} inputs of {n} patches", masks.len())));
        }
        let n_vis = masks[0].visible().len();
        if masks.iter().any(|m| m.visible().len() != n_vis) {
            return Err(Error::Shape("masks in a batch must hide the same number of patches".into()));
        }
        let d = self.cfg.dim;

        // shuffle order: visible first, then hidden; restore is its inverse
        let mut keep = Vec::with_capacity(b);
        let mut restore = Vec::with_capacity(b);
        for m in masks {
            let order: Vec<usize> = m.visible().into_iter().chain(m.hidden()).collect();
            let mut inv = vec![0u32; n];
            for (slot, &patch) in order.iter().enumerate() {
                inv[patch] = slot as u32;
            }
            keep.push(order[..n_vis].iter().map(|&i| i as u32).collect::<Vec<_>>());
            restore.push(inv);
        }

        // select visible patches before any computation touches them
        let patches = patchify(x, self.cfg.patch_size)?;
        let mut h = if n_vis > 0 {
            let visible = Self::gather_tokens(&patches, &keep)?;
            let pos = Self::gather_tokens(&self.pos.broadcast_as((b, n, d))?, &keep)?;
            (self.embed.forward(&visible)? + pos)?
        } else {
            Tensor::zeros((b, 0, d), self.dtype, &self.device)?
        };
        for blk in &self.encoder {
            h = blk.forward(&h)?;
        }
        let h = self.dec_embed.forward(&self.enc_norm.forward(&h)?)?;
        let hidden = n - n_vis;
        let full = if hidden > 0 {
            let fill = self.mask_token.broadcast_as((b, hidden, d))?;
            Tensor::cat(&[&h, &fill], 1)?
        } else {
            h
        };
        let mut z = Self::gather_tokens(&full, &restore)?.broadcast_add(&self.pos)?;
        for blk in &self.decoder {
            z = blk.forward(&z)?;
        }
        Ok(self.pred.forward(&self.dec_norm.forward(&z)?)?)
    }

    /// Reconstructed image `(B, C, H, W)`.
    pub fn reconstruct(&self, x: &Tensor, masks: &[Mask]) -> Result<Tensor> {
        let r = self.reconstruct_patches(x, masks)?;
        unpatchify(&r, self.cfg.patch_size, self.in_channels, self.image_size, self.image_size)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_varmap(&self.params, &dir.join("mae.safetensors"))?;
        let manifest = MaeManifest {
            config: self.cfg,
            in_channels: self.in_channels,
            image_size: self.image_size,
        };
        let path = dir.join("mae.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, dtype: DType) -> Result<Self> {
        let path = dir.join("mae.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: MaeManifest = serde_json::from_slice(&bytes)?;
        let tensors = load_tensors(&dir.join("mae.safetensors"))?;
        Self::build(
            &m.config,
            m.in_channels,
            m.image_size,
            ParamBuilder::copying(tensors, dtype, &Device::Cpu),
        )
    }
}
