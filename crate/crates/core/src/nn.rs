//! Parameter plumbing and the handful of layers shared by the three networks.
//!
//! Parameters live in a candle [`VarMap`] per network component. They are
//! created through a [`ParamBuilder`] that either draws them from a seeded
//! stream (so initialization is bit-reproducible) or copies them from an
//! existing tensor map (deep clones and checkpoint loading).

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::rc::Rc;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{GroupNorm, Linear, Optimizer, VarMap};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_from, Rng};

/// Host-side copy of a named set of parameters, in `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet(pub BTreeMap<String, ParamTensor>);

impl ParamSet {
    pub fn from_varmap(map: &VarMap) -> Result<Self> {
        let data = map.data().lock().expect("varmap lock poisoned");
        let mut out = BTreeMap::new();
        for (name, var) in data.iter() {
            let t = var.as_tensor();
            let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            out.insert(
                name.clone(),
                ParamTensor {
                    shape: t.dims().to_vec(),
                    data: values,
                },
            );
        }
        Ok(ParamSet(out))
    }

    /// Overwrites every variable of `map` with the value of the same name.
    pub fn write_into(&self, map: &VarMap) -> Result<()> {
        let data = map.data().lock().expect("varmap lock poisoned");
        if data.len() != self.0.len() {
            return Err(Error::Shape(format!(
                "parameter count {} vs {}",
                self.0.len(),
                data.len()
            )));
        }
        for (name, var) in data.iter() {
            let p = self
                .0
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
            if p.shape != var.dims() {
                return Err(Error::Shape(format!(
                    "{name}: {:?} vs {:?}",
                    p.shape,
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(p.data.clone(), p.shape.as_slice(), var.device())?
                .to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn is_congruent(&self, other: &ParamSet) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(other.0.iter())
                .all(|((na, a), (nb, b))| na == nb && a.shape == b.shape)
    }

    pub fn num_values(&self) -> usize {
        self.0.values().map(|p| p.data.len()).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|p| p.data.iter())
            .map(|v| v * v)
            .sum()
    }
}

/// Deep copy of a var map: new storage, same names and values.
pub fn clone_varmap(map: &VarMap) -> Result<VarMap> {
    let out = VarMap::new();
    {
        let src = map.data().lock().expect("varmap lock poisoned");
        let mut dst = out.data().lock().expect("varmap lock poisoned");
        for (name, var) in src.iter() {
            dst.insert(name.clone(), Var::from_tensor(&var.as_tensor().copy()?)?);
        }
    }
    Ok(out)
}

pub fn varmap_tensors(map: &VarMap) -> HashMap<String, Tensor> {
    let data = map.data().lock().expect("varmap lock poisoned");
    data.iter()
        .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
        .collect()
}

pub fn save_varmap(map: &VarMap, path: &Path) -> Result<()> {
    map.save(path).map_err(Error::from)
}

pub fn load_tensors(path: &Path) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    Ok(candle_core::safetensors::load(path, &Device::Cpu)?)
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// U(-b, b) with b = 1/sqrt(fan_in).
    Uniform { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

enum Source {
    Random(Rng),
    Copy(HashMap<String, Tensor>),
}

struct Shared {
    map: VarMap,
    source: Source,
    dtype: DType,
    device: Device,
}

/// Creates named variables from a seeded stream or an existing tensor map.
#[derive(Clone)]
pub struct ParamBuilder {
    shared: Rc<RefCell<Shared>>,
    prefix: String,
}

impl ParamBuilder {
    pub fn random(seed: u64, dtype: DType, device: &Device) -> Self {
        Self::with_source(Source::Random(rng_from(seed)), dtype, device)
    }

    pub fn copying(tensors: HashMap<String, Tensor>, dtype: DType, device: &Device) -> Self {
        Self::with_source(Source::Copy(tensors), dtype, device)
    }

    fn with_source(source: Source, dtype: DType, device: &Device) -> Self {
        Self {
            shared: Rc::new(RefCell::new(Shared {
                map: VarMap::new(),
                source,
                dtype,
                device: device.clone(),
            })),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            shared: self.shared.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.shared.borrow().dtype
    }

    pub fn device(&self) -> Device {
        self.shared.borrow().device.clone()
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut shared = self.shared.borrow_mut();
        let dtype = shared.dtype;
        let device = shared.device.clone();
        let tensor = match &mut shared.source {
            Source::Random(rng) => {
                let n: usize = shape.iter().product();
                let values: Vec<f64> = match init {
                    Init::Uniform { fan_in } => {
                        let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-b..b)).collect()
                    }
                    Init::Normal { std } => (0..n)
                        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
                        .collect::<Vec<f64>>(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Tensor::from_vec(values, shape, &device)?.to_dtype(dtype)?
            }
            Source::Copy(tensors) => {
                let t = tensors
                    .get(&full)
                    .ok_or_else(|| Error::Shape(format!("missing parameter {full}")))?;
                if t.dims() != shape {
                    return Err(Error::Shape(format!(
                        "{full}: stored {:?}, expected {:?}",
                        t.dims(),
                        shape
                    )));
                }
                t.to_device(&device)?.to_dtype(dtype)?.copy()?
            }
        };
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        shared
            .map
            .data()
            .lock()
            .expect("varmap lock poisoned")
            .insert(full, var);
        Ok(out)
    }

    pub fn varmap(&self) -> VarMap {
        self.shared.borrow().map.clone()
    }
}

pub fn linear(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let w = pb.get(&[out_dim, in_dim], "weight", Init::Uniform { fan_in: in_dim })?;
    let b = pb.get(&[out_dim], "bias", Init::Uniform { fan_in: in_dim })?;
    Ok(Linear::new(w, Some(b)))
}

pub fn linear_zeros(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let w = pb.get(&[out_dim, in_dim], "weight", Init::Zeros)?;
    let b = pb.get(&[out_dim], "bias", Init::Zeros)?;
    Ok(Linear::new(w, Some(b)))
}

pub fn conv2d(
    pb: &ParamBuilder,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Conv2d> {
    let fan_in = in_ch * kernel * kernel;
    let weight = pb.get(&[out_ch, in_ch, kernel, kernel], "weight", Init::Uniform { fan_in })?;
    let bias = pb.get(&[out_ch], "bias", Init::Uniform { fan_in })?;
    Ok(Conv2d {
        weight,
        bias,
        stride,
        padding,
    })
}

/// 2-D convolution with bias over NCHW input.
///
/// candle 0.9's tiled CPU kernel decides whether its input is already
/// channels-last by comparing strides. A contiguous NCHW tensor with
/// `channels == height == width` passes that test and is read with the wrong
/// layout. Such inputs get one zero channel appended (and a matching zero
/// kernel slice), which changes nothing numerically but breaks the tie.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let kernel = self.weight.dim(2)?;
        let y = if c == h && c == w && kernel > 1 {
            let x = Tensor::cat(&[x, &Tensor::zeros((b, 1, h, w), x.dtype(), x.device())?], 1)?;
            let (o, _, kh, kw) = self.weight.dims4()?;
            let zk = Tensor::zeros((o, 1, kh, kw), self.weight.dtype(), self.weight.device())?;
            let k = Tensor::cat(&[&self.weight, &zk], 1)?;
            x.conv2d(&k, self.padding, self.stride, 1, 1)?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        };
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Largest group count in {8, 4, 2, 1} dividing `channels`.
pub fn group_count(channels: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

pub fn group_norm(pb: &ParamBuilder, channels: usize) -> Result<GroupNorm> {
    let w = pb.get(&[channels], "weight", Init::Ones)?;
    let b = pb.get(&[channels], "bias", Init::Zeros)?;
    Ok(GroupNorm::new(w, b, channels, group_count(channels), 1e-5)?)
}

/// Layer normalization over the last dimension, written with primitive ops so
/// that it is differentiable in every dtype.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get(&[dim], "weight", Init::Ones)?,
            bias: pb.get(&[dim], "bias", Init::Zeros)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        xc.broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// Standard normal tensor from a seeded stream.
pub fn randn(rng: &mut Rng, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

pub fn randn_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

/// SGD with heavy-ball momentum: `v <- mu v + g`, `p <- p - lr v`.
pub struct SgdMomentum {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    cfg: SgdConfig,
}

impl Optimizer for SgdMomentum {
    type Config = SgdConfig;

    fn new(vars: Vec<Var>, cfg: SgdConfig) -> candle_core::Result<Self> {
        let vars: Vec<Var> = vars.into_iter().filter(|v| v.dtype().is_float()).collect();
        let velocity = vec![None; vars.len()];
        Ok(Self {
            vars,
            velocity,
            cfg,
        })
    }

    fn step(&mut self, grads: &candle_core::backprop::GradStore) -> candle_core::Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var) else { continue };
            let g = if self.cfg.weight_decay != 0.0 {
                (g + (var.as_tensor() * self.cfg.weight_decay)?)?
            } else {
                g.clone()
            };
            let v = match vel.take() {
                Some(prev) if self.cfg.momentum != 0.0 => ((prev * self.cfg.momentum)? + g)?,
                _ => g,
            };
            var.set(&(var.as_tensor() - (&v * self.cfg.lr)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.cfg.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }
}

/// All variables of the given maps in name order, so optimizer state lines up
/// across runs.
pub fn sorted_vars(maps: &[&VarMap]) -> Vec<Var> {
    let mut out = Vec::new();
    for map in maps {
        let data = map.data().lock().expect("varmap lock poisoned");
        let mut named: Vec<(&String, &Var)> = data.iter().collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        out.extend(named.into_iter().map(|(_, v)| v.clone()));
    }
    out
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_is_deterministic() {
        let build = || {
            let pb = ParamBuilder::random(3, DType::F32, &Device::Cpu);
            linear(&pb.pp("a"), 4, 3).unwrap();
            ParamSet::from_varmap(&pb.varmap()).unwrap()
        };
        assert_eq!(build(), build());
    }

    /// Direct-loop reference convolution, stride 1.
    fn naive_conv(x: &[f64], k: &[f64], bias: &[f64], (c, s, o, ks, pad): (usize, usize, usize, usize, usize)) -> Vec<f64> {
        let out = s + 2 * pad - ks + 1;
        let mut y = vec![0.0; o * out * out];
        for oc in 0..o {
            for i in 0..out {
                for j in 0..out {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for u in 0..ks {
                            for v in 0..ks {
                                let (yy, xx) = ((i + u) as isize - pad as isize, (j + v) as isize - pad as isize);
                                if yy >= 0 && xx >= 0 && (yy as usize) < s && (xx as usize) < s {
                                    acc += k[((oc * c + ic) * ks + u) * ks + v] * x[(ic * s + yy as usize) * s + xx as usize];
                                }
                            }
                        }
                    }
                    y[(oc * out + i) * out + j] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops_including_square_channel_case() {
        for (c, s, o) in [(4, 4, 3), (3, 3, 5), (8, 8, 8), (3, 8, 4), (16, 16, 2)] {
            let pb = ParamBuilder::random(5, DType::F64, &Device::Cpu);
            let conv = conv2d(&pb.pp("c"), c, o, 3, 1, 1).unwrap();
            let mut rng = rng_from(9);
            let x = randn_vec(&mut rng, c * s * s);
            let xt = Tensor::from_vec(x.clone(), (1, c, s, s), &Device::Cpu).unwrap();
            let got: Vec<f64> = conv.forward(&xt).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let k: Vec<f64> = conv.weight.flatten_all().unwrap().to_vec1().unwrap();
            let bias: Vec<f64> = conv.bias.to_vec1().unwrap();
            let want = naive_conv(&x, &k, &bias, (c, s, o, 3, 1));
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-10, "c{c} s{s} o{o}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn copying_builder_reproduces_values() {
        let pb = ParamBuilder::random(5, DType::F32, &Device::Cpu);
        conv2d(&pb.pp("c"), 2, 3, 3, 1, 1).unwrap();
        let src = pb.varmap();
        let copy = ParamBuilder::copying(varmap_tensors(&src), DType::F32, &Device::Cpu);
        conv2d(&copy.pp("c"), 2, 3, 3, 1, 1).unwrap();
        assert_eq!(
            ParamSet::from_varmap(&src).unwrap(),
            ParamSet::from_varmap(&copy.varmap()).unwrap()
        );
        // independent storage
        let v = copy.varmap().all_vars();
        v[0].set(&v[0].zeros_like().unwrap()).unwrap();
        assert_ne!(
            ParamSet::from_varmap(&src).unwrap(),
            ParamSet::from_varmap(&copy.varmap()).unwrap()
        );
    }

    #[test]
    fn param_set_write_checks_shapes() {
        let pb = ParamBuilder::random(1, DType::F32, &Device::Cpu);
        linear(&pb, 2, 2).unwrap();
        let map = pb.varmap();
        let mut ps = ParamSet::from_varmap(&map).unwrap();
        ps.0.get_mut("weight").unwrap().shape = vec![4];
        assert!(matches!(ps.write_into(&map), Err(Error::Shape(_))));
    }

    #[test]
    fn sgd_momentum_matches_hand_update() {
        let var = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let mut opt = SgdMomentum::new(
            vec![var.clone()],
            SgdConfig {
                lr: 0.1,
                momentum: 0.5,
                weight_decay: 0.0,
            },
        )
        .unwrap();
        // loss = sum(p^2) -> grad 2p
        for _ in 0..2 {
            let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
        }
        // step 1: v = 2p0, p1 = p0 - 0.2 p0 = 0.8 p0
        // step 2: v = 0.5*2p0 + 2*0.8p0 = 2.6 p0, p2 = 0.8p0 - 0.26p0 = 0.54 p0
        let got = var.as_tensor().to_vec1::<f64>().unwrap();
        assert!((got[0] - 0.54).abs() < 1e-12);
        assert!((got[1] + 1.08).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_normalizes_last_dim() {
        let pb = ParamBuilder::random(0, DType::F64, &Device::Cpu);
        let ln = LayerNorm::new(&pb, 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
