//! Finite-difference gradient checks shared by the integration tests.

use candle_core::{DType, Device, Tensor, Var};
use fedpurify::diffusion::{diffusion_loss, DiffusionConfig, UNet};
use fedpurify::moe::{ArchConfig, ClientModel, LossConfig};
use fedpurify::nn::randn;
use fedpurify::seed::rng_from;
use rand::Rng as _;

const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
const PROBES_PER_VAR: usize = 3;

fn get(v: &Var, i: usize) -> f64 {
    v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[i]
}

fn set(v: &Var, i: usize, value: f64) {
    let mut data = v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    data[i] = value;
    let t = Tensor::from_vec(data, v.as_tensor().shape(), v.as_tensor().device()).unwrap();
    v.set(&t).unwrap();
}

/// Compares `d loss / d v[i]` for a few coordinates of every variable and
/// returns the worst relative error together with the number of probes.
fn check(vars: &[Var], loss: impl Fn() -> Tensor, seed: u64) -> (f64, usize) {
    let grads = loss().backward().unwrap();
    let mut rng = rng_from(seed);
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for v in vars {
        let n = v.as_tensor().elem_count();
        let Some(g) = grads.get(v.as_tensor()) else {
            continue;
        };
        let g = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for _ in 0..PROBES_PER_VAR.min(n) {
            let i = rng.random_range(0..n);
            let orig = get(v, i);
            set(v, i, orig + H);
            let up = loss().to_scalar::<f64>().unwrap();
            set(v, i, orig - H);
            let down = loss().to_scalar::<f64>().unwrap();
            set(v, i, orig);
            let numeric = (up - down) / (2.0 * H);
            let scale = g[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((g[i] - numeric).abs() / scale);
            probes += 1;
        }
    }
    (worst, probes)
}

/// Worst relative gradient error of the regularized client objective.
pub fn client_loss_check() -> (f64, usize) {
    let arch = ArchConfig {
        num_experts: 2,
        width: 4,
        feature_dim: 6,
        head_hidden: 6,
        attention_hidden: 5,
        ..Default::default()
    };
    let model = ClientModel::new(&arch, 0, 3, DType::F64).unwrap();
    let x = randn(&mut rng_from(1), &[3, 3, 8, 8], DType::F64, &Device::Cpu).unwrap();
    let labels = [0, 1, 1];
    let cfg = LossConfig { beta: 0.1, gamma: 0.05 };
    let vars = model.all_vars();
    check(&vars, || model.client_loss(&x, &labels, &cfg).unwrap().total, 5)
}

/// Worst relative gradient error of the noise-prediction objective.
pub fn diffusion_loss_check() -> (f64, usize) {
    let cfg = DiffusionConfig {
        steps: 20,
        channels: 4,
        levels: 1,
        time_dim: 4,
        ..Default::default()
    };
    let unet = UNet::new(&cfg, 3, 2, DType::F64).unwrap();
    let schedule = cfg.schedule().unwrap();
    let x0 = randn(&mut rng_from(8), &[2, 3, 8, 8], DType::F64, &Device::Cpu).unwrap();
    let noise = randn(&mut rng_from(9), &[2, 3, 8, 8], DType::F64, &Device::Cpu).unwrap();
    let t = [3, 17];
    let vars = unet.vars();
    check(&vars, || diffusion_loss(&unet, &x0, &t, &noise, &schedule).unwrap(), 6)
}
