use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Linear, VarMap};
use serde::{Deserialize, Serialize};

use super::backbone::Backbone;
use super::{ArchConfig, FeatureSource, LossConfig};
use crate::classifier::{argmax_rows, Classifier};
use crate::error::{Error, Result};
use crate::nn::{
    clone_varmap, linear, load_tensors, save_varmap, scalar, varmap_tensors, ParamBuilder,
    ParamSet,
};
use crate::seed::mix;

const LOG_FLOOR: f64 = 1e-12;
const ENTROPY_FLOOR: f64 = 1e-30;

#[derive(Clone)]
struct Expert {
    backbone: Backbone,
    fc1: Linear,
    fc2: Linear,
    params: VarMap,
}

impl Expert {
    fn new(pb: &ParamBuilder, arch: &ArchConfig) -> Result<Self> {
        Ok(Self {
            backbone: Backbone::new(
                &pb.pp("backbone"),
                arch.backbone,
                arch.in_channels,
                arch.width,
                arch.stem_stride,
                arch.feature_dim,
            )?,
            fc1: linear(&pb.pp("head.fc1"), arch.feature_dim, arch.head_hidden)?,
            fc2: linear(&pb.pp("head.fc2"), arch.head_hidden, arch.num_classes)?,
            params: pb.varmap(),
        })
    }

    fn head(&self, features: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(features)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct AttentionNet {
    fc1: Linear,
    fc2: Linear,
    params: Vec<Tensor>,
}

impl AttentionNet {
    fn new(pb: &ParamBuilder, arch: &ArchConfig) -> Result<Self> {
        let fc1 = linear(&pb.pp("fc1"), arch.feature_dim, arch.attention_hidden)?;
        let fc2 = linear(&pb.pp("fc2"), arch.attention_hidden, 1)?;
        let params = vec![
            fc1.weight().clone(),
            fc1.bias().expect("bias").clone(),
            fc2.weight().clone(),
            fc2.bias().expect("bias").clone(),
        ];
        Ok(Self { fc1, fc2, params })
    }

    fn forward(&self, psi: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(psi)?.relu()?)
    }

    fn sq_norm(&self) -> candle_core::Result<Tensor> {
        let mut acc = self.params[0].sqr()?.sum_all()?;
        for p in &self.params[1..] {
            acc = (acc + p.sqr()?.sum_all()?)?;
        }
        Ok(acc)
    }
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct MoeOutput {
    /// Mixture prediction `(B, classes)`, rows on the simplex.
    pub probs: Tensor,
    /// Mixing weights `(B, K)`.
    pub alpha: Tensor,
    /// Raw attention scores `(B, K)`.
    pub attention_logits: Tensor,
    /// Each expert's class probabilities `(B, K, classes)`.
    pub expert_probs: Tensor,
}

/// Regularized client objective over one batch, with its parts.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// Sum over the batch of `CE + beta * sum_k |phi_k|^2 + gamma * H(alpha)`.
    pub total: Tensor,
    pub cross_entropy: f64,
    pub attention_l2: f64,
    pub entropy: f64,
}

/// One client's mixture of experts and its routing networks.
pub struct ClientModel {
    client_id: usize,
    arch: ArchConfig,
    dtype: DType,
    device: Device,
    experts: Vec<Expert>,
    attention: Vec<AttentionNet>,
    router: Option<Backbone>,
    attention_map: VarMap,
}

impl std::fmt::Debug for ClientModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientModel")
            .field("client_id", &self.client_id)
            .field("arch", &self.arch)
            .field("dtype", &self.dtype)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    client_id: usize,
    arch: ArchConfig,
    seed: u64,
    round: usize,
    expert_shapes: Vec<Vec<(String, Vec<usize>)>>,
}

impl ClientModel {
    /// Fresh model; experts and routing are seeded independently from `seed`.
    pub fn new(arch: &ArchConfig, client_id: usize, seed: u64, dtype: DType) -> Result<Self> {
        arch.validate()?;
        let device = Device::Cpu;
        let expert_builders: Vec<ParamBuilder> = (0..arch.num_experts)
            .map(|k| ParamBuilder::random(mix(seed, k as u64), dtype, &device))
            .collect();
        let attention_builder = ParamBuilder::random(mix(seed, u64::MAX), dtype, &device);
        Self::build(arch, client_id, &expert_builders, &attention_builder)
    }

    fn build(
        arch: &ArchConfig,
        client_id: usize,
        expert_builders: &[ParamBuilder],
        attention_builder: &ParamBuilder,
    ) -> Result<Self> {
        let experts = expert_builders
            .iter()
            .map(|pb| Expert::new(pb, arch))
            .collect::<Result<Vec<_>>>()?;
        let attention = (0..arch.num_experts)
            .map(|k| AttentionNet::new(&attention_builder.pp(format!("attn{k}")), arch))
            .collect::<Result<Vec<_>>>()?;
        let router = match arch.feature_source {
            FeatureSource::FirstExpert => None,
            FeatureSource::ExtraBackbone => Some(Backbone::new(
                &attention_builder.pp("router"),
                arch.backbone,
                arch.in_channels,
                arch.width,
                arch.stem_stride,
                arch.feature_dim,
            )?),
        };
        Ok(Self {
            client_id,
            arch: *arch,
            dtype: attention_builder.dtype(),
            device: attention_builder.device(),
            experts,
            attention,
            router,
            attention_map: attention_builder.varmap(),
        })
    }

    fn from_tensors(
        arch: &ArchConfig,
        client_id: usize,
        experts: Vec<HashMap<String, Tensor>>,
        attention: HashMap<String, Tensor>,
        dtype: DType,
    ) -> Result<Self> {
        let device = Device::Cpu;
        if experts.len() != arch.num_experts {
            return Err(Error::Shape(format!(
                "{} expert blobs for K={}",
                experts.len(),
                arch.num_experts
            )));
        }
        let eb: Vec<ParamBuilder> = experts
            .into_iter()
            .map(|t| ParamBuilder::copying(t, dtype, &device))
            .collect();
        let ab = ParamBuilder::copying(attention, dtype, &device);
        Self::build(arch, client_id, &eb, &ab)
    }

    /// Independent copy with its own parameter storage.
    pub fn deep_clone(&self) -> Result<Self> {
        self.with_client_id(self.client_id)
    }

    pub fn with_client_id(&self, client_id: usize) -> Result<Self> {
        let experts = self
            .experts
            .iter()
            .map(|e| Ok(varmap_tensors(&clone_varmap(&e.params)?)))
            .collect::<Result<Vec<_>>>()?;
        let attention = varmap_tensors(&clone_varmap(&self.attention_map)?);
        Self::from_tensors(&self.arch, client_id, experts, attention, self.dtype)
    }

    /// Same parameters, different precision.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let experts = self.experts.iter().map(|e| varmap_tensors(&e.params)).collect();
        Self::from_tensors(
            &self.arch,
            self.client_id,
            experts,
            varmap_tensors(&self.attention_map),
            dtype,
        )
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn expert_params(&self, k: usize) -> Result<ParamSet> {
        ParamSet::from_varmap(&self.experts[k].params)
    }

    pub fn set_expert_params(&self, k: usize, params: &ParamSet) -> Result<()> {
        params.write_into(&self.experts[k].params)
    }

    pub fn attention_params(&self) -> Result<ParamSet> {
        ParamSet::from_varmap(&self.attention_map)
    }

    pub fn set_attention_params(&self, params: &ParamSet) -> Result<()> {
        params.write_into(&self.attention_map)
    }

    pub fn expert_varmap(&self, k: usize) -> &VarMap {
        &self.experts[k].params
    }

    pub fn attention_varmap(&self) -> &VarMap {
        &self.attention_map
    }

    /// Every trainable variable, experts first, in a fixed order.
    pub fn all_vars(&self) -> Vec<Var> {
        let mut maps: Vec<&VarMap> = self.experts.iter().map(|e| &e.params).collect();
        maps.push(&self.attention_map);
        crate::nn::sorted_vars(&maps)
    }

    /// Sets every attention-network parameter to zero.
    pub fn zero_attention(&self) -> Result<()> {
        for net in &self.attention {
            for p in &net.params {
                let var = self.find_attention_var(p)?;
                var.set(&var.zeros_like()?)?;
            }
        }
        Ok(())
    }

    fn find_attention_var(&self, t: &Tensor) -> Result<Var> {
        let data = self.attention_map.data().lock().expect("varmap lock poisoned");
        data.values()
            .find(|v| v.as_tensor().id() == t.id())
            .cloned()
            .ok_or_else(|| Error::Shape("attention parameter not in map".into()))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != self.arch.in_channels {
            return Err(Error::Shape(format!(
                "expected (B, {}, H, W) input, got {:?}",
                self.arch.in_channels, dims
            )));
        }
        Ok(())
    }

    /// Shared routing features `psi(x)`, `(B, d)`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(match &self.router {
            Some(r) => r.forward(x)?,
            None => self.experts[0].backbone.forward(x)?,
        })
    }

    pub fn attention_logits(&self, psi: &Tensor) -> Result<Tensor> {
        let d = psi.dims();
        if d.len() != 2 || d[1] != self.arch.feature_dim {
            return Err(Error::Shape(format!(
                "features must be (B, {}), got {:?}",
                self.arch.feature_dim, d
            )));
        }
        let scores = self
            .attention
            .iter()
            .map(|net| net.forward(psi))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::cat(&scores, 1)?)
    }

    /// Softmax of the attention scores; each row lies on the K-simplex.
    pub fn attention_weights(&self, psi: &Tensor) -> Result<Tensor> {
        softmax_rows(&self.attention_logits(psi)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<MoeOutput> {
        self.check_input(x)?;
        let feats = self
            .experts
            .iter()
            .map(|e| e.backbone.forward(x))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let expert_probs = self
            .experts
            .iter()
            .zip(&feats)
            .map(|(e, f)| candle_nn::ops::softmax(&e.head(f)?, D::Minus1))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let expert_probs = Tensor::stack(&expert_probs, 1)?;
        let psi = match &self.router {
            Some(r) => r.forward(x)?,
            None => feats[0].clone(),
        };
        let attention_logits = self.attention_logits(&psi)?;
        let alpha = softmax_rows(&attention_logits)?;
        let probs = alpha.unsqueeze(2)?.broadcast_mul(&expert_probs)?.sum(1)?;
        Ok(MoeOutput {
            probs,
            alpha,
            attention_logits,
            expert_probs,
        })
    }

    /// Regularized objective summed over the batch. Cross-entropy is taken on
    /// the mixed probabilities with a `1e-12` floor inside the log.
    pub fn client_loss(
        &self,
        x: &Tensor,
        labels: &[usize],
        cfg: &LossConfig,
    ) -> Result<LossBreakdown> {
        // ReLU and the log floor can swallow NaN, so screen the inputs too
        let input_sums = x.flatten_from(1)?.sum(1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if let Some(index) = input_sums.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { index });
        }
        let out = self.forward(x)?;
        self.loss_from_output(&out, labels, cfg)
    }

    pub(crate) fn loss_from_output(
        &self,
        out: &MoeOutput,
        labels: &[usize],
        cfg: &LossConfig,
    ) -> Result<LossBreakdown> {
        let b = labels.len();
        if b == 0 {
            return Err(Error::EmptyDataset);
        }
        if out.probs.dim(0)? != b {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {}",
                b,
                out.probs.dim(0)?
            )));
        }
        // the log floor would mask NaN, so check the mixture first
        let row_sums = out.probs.sum(1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if let Some(index) = row_sums.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { index });
        }
        let ce = cross_entropy_per_sample(&out.probs, labels)?;
        let ent = entropy_rows(&out.alpha)?;
        let mut l2 = self.attention[0].sq_norm()?;
        for net in &self.attention[1..] {
            l2 = (l2 + net.sq_norm()?)?;
        }
        let per_sample = ((&ce + (&ent * cfg.gamma)?)?.broadcast_add(&(&l2 * cfg.beta)?))?;
        let values = per_sample.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { index });
        }
        Ok(LossBreakdown {
            total: per_sample.sum_all()?,
            cross_entropy: scalar(&ce.sum_all()?)?,
            attention_l2: scalar(&l2)?,
            entropy: scalar(&ent.sum_all()?)?,
        })
    }

    pub fn save(&self, dir: &Path, seed: u64, round: usize) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut expert_shapes = Vec::new();
        for (k, e) in self.experts.iter().enumerate() {
            save_varmap(&e.params, &dir.join(format!("expert_{k}.safetensors")))?;
            let mut shapes: Vec<(String, Vec<usize>)> = varmap_tensors(&e.params)
                .into_iter()
                .map(|(n, t)| (n, t.dims().to_vec()))
                .collect();
            shapes.sort();
            expert_shapes.push(shapes);
        }
        save_varmap(&self.attention_map, &dir.join("attention.safetensors"))?;
        let manifest = Manifest {
            client_id: self.client_id,
            arch: self.arch,
            seed,
            round,
            expert_shapes,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, dtype: DType) -> Result<Self> {
        let path = dir.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        let experts = (0..manifest.arch.num_experts)
            .map(|k| load_tensors(&dir.join(format!("expert_{k}.safetensors"))))
            .collect::<Result<Vec<_>>>()?;
        let attention = load_tensors(&dir.join("attention.safetensors"))?;
        Self::from_tensors(&manifest.arch, manifest.client_id, experts, attention, dtype)
    }
}

impl Classifier for ClientModel {
    fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(&x.to_dtype(self.dtype)?)?.probs)
    }

    fn loss_and_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let xv = Var::from_tensor(&x.to_dtype(self.dtype)?)?;
        let out = self.forward(xv.as_tensor())?;
        let loss = cross_entropy_per_sample(&out.probs, labels)?.sum_all()?;
        let grads = loss.backward()?;
        let g = grads
            .get(xv.as_tensor())
            .cloned()
            .unwrap_or(xv.as_tensor().zeros_like()?);
        Ok((scalar(&loss)?, g.to_dtype(x.dtype())?))
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        argmax_rows(&self.predict_proba(x)?)
    }
}

fn cross_entropy_per_sample(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let idx = Tensor::from_vec(idx, (labels.len(), 1), probs.device())?;
    let p = probs.gather(&idx, 1)?.squeeze(1)?;
    Ok(p.maximum(LOG_FLOOR)?.log()?.neg()?)
}

/// Row-wise `-sum_k a_k log a_k` with `0 log 0 = 0`.
fn entropy_rows(alpha: &Tensor) -> Result<Tensor> {
    Ok((alpha * alpha.maximum(ENTROPY_FLOOR)?.log()?)?.sum(1)?.neg()?)
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, D::Minus1)?)
}

/// `H(a) = -sum a_k ln a_k`, with `0 ln 0 = 0`.
pub fn entropy(alpha: &[f64]) -> f64 {
    -alpha
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| a * a.ln())
        .sum::<f64>()
}
