//! Server-side aggregation and the round loop.
//!
//! Clients are simulated in-process. Each one trains a private copy of its
//! model and sends back only parameter blobs over a channel; the server
//! averages expert parameters weighted by local sample counts and broadcasts
//! the result. Attention networks stay local unless `aggregate_attention` is
//! set.

mod driver;

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::attack::AttackEval;
use crate::data::{batch_images, ClientDataset};
use crate::error::{Error, Result};
use crate::moe::{local_update, ClientModel, DefenseHook, LocalReport, LossConfig, TrainConfig};
use crate::nn::{scalar, ParamSet, ParamTensor};
use crate::seed::{mix, rng_from};

pub use driver::{
    evaluate_clients, load_clients, load_defense, prepare_data, run_training, Phase, PreparedData, RunOptions,
    TrainingArtifacts, DTYPE, ROUNDS_HEADER,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub n_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    /// Fraction of clients sampled each round.
    pub participation: f64,
    /// Also average attention networks (removes personalization).
    pub aggregate_attention: bool,
    /// Detect and purify training inputs during local updates.
    pub defend_during_training: bool,
    /// Test samples attacked when monitoring each round (0 = all).
    pub eval_samples: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            n_clients: 10,
            rounds: 20,
            local_epochs: 15,
            participation: 1.0,
            aggregate_attention: false,
            defend_during_training: false,
            eval_samples: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::Config("fed: n_clients must be at least 1".into()));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config(format!(
                "fed: participation {} must be in (0, 1]",
                self.participation
            )));
        }
        Ok(())
    }

    /// Number of clients taking part in each round.
    pub fn clients_per_round(&self) -> usize {
        ((self.participation * self.n_clients as f64).ceil() as usize).clamp(1, self.n_clients)
    }
}

fn pairwise_sum(terms: &[f64]) -> f64 {
    match terms.len() {
        0 => 0.0,
        1 => terms[0],
        n => pairwise_sum(&terms[..n / 2]) + pairwise_sum(&terms[n / 2..]),
    }
}

/// Sample-count weighted mean of client parameters, `sum_i (n_i / n) theta_i`.
///
/// Uploads are ordered by client id before summing, and each element is
/// evaluated as `theta_0 + sum_i (n_i / n)(theta_i - theta_0)` with pairwise
/// summation, so the result does not depend on upload order and equals the
/// input exactly when all clients agree.
pub fn fedavg(uploads: &[(usize, &ParamSet, f64)]) -> Result<ParamSet> {
    if uploads.is_empty() {
        return Err(Error::InvalidArgument("fedavg needs at least one client".into()));
    }
    let mut sorted: Vec<&(usize, &ParamSet, f64)> = uploads.iter().collect();
    sorted.sort_by_key(|u| u.0);
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidArgument("duplicate client id in fedavg".into()));
    }
    if let Some(u) = sorted.iter().find(|u| !(u.2 > 0.0) || !u.2.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "client {} has non-positive weight {}",
            u.0, u.2
        )));
    }
    let total: f64 = pairwise_sum(&sorted.iter().map(|u| u.2).collect::<Vec<_>>());
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("zero total weight".into()));
    }
    let anchor = sorted[0].1;
    if let Some(u) = sorted.iter().find(|u| !u.1.is_congruent(anchor)) {
        return Err(Error::Shape(format!(
            "client {} parameters differ in shape from client {}",
            u.0, sorted[0].0
        )));
    }
    let fractions: Vec<f64> = sorted.iter().map(|u| u.2 / total).collect();
    let mut out = BTreeMap::new();
    let mut terms = vec![0.0; sorted.len()];
    for (name, base) in &anchor.0 {
        let tensors: Vec<&ParamTensor> = sorted.iter().map(|u| &u.1 .0[name]).collect();
        let data = (0..base.data.len())
            .map(|j| {
                let v0 = base.data[j];
                for (t, (p, f)) in terms.iter_mut().zip(tensors.iter().zip(&fractions)) {
                    *t = f * (p.data[j] - v0);
                }
                v0 + pairwise_sum(&terms)
            })
            .collect();
        out.insert(
            name.clone(),
            ParamTensor {
                shape: base.shape.clone(),
                data,
            },
        );
    }
    Ok(ParamSet(out))
}

/// Server-owned global state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationState {
    /// Completed rounds.
    pub round: usize,
    pub global_experts: Vec<ParamSet>,
    /// Only populated when attention networks are aggregated too.
    pub global_attention: Option<ParamSet>,
    /// Local sample count per client id.
    pub sample_counts: BTreeMap<usize, usize>,
}

impl FederationState {
    /// Globals taken from `init`; sample counts from the client datasets.
    pub fn new(init: &ClientModel, datasets: &[ClientDataset], aggregate_attention: bool) -> Result<Self> {
        let global_experts = (0..init.num_experts())
            .map(|k| init.expert_params(k))
            .collect::<Result<_>>()?;
        let global_attention = if aggregate_attention {
            Some(init.attention_params()?)
        } else {
            None
        };
        Ok(Self {
            round: 0,
            global_experts,
            global_attention,
            sample_counts: datasets.iter().map(|d| (d.client_id(), d.len())).collect(),
        })
    }

    pub fn total_samples(&self) -> usize {
        self.sample_counts.values().sum()
    }
}

/// Copies the global experts (and global attention, if aggregated) into
/// every client. Local attention networks are left alone otherwise.
pub fn broadcast(state: &FederationState, clients: &[ClientModel]) -> Result<()> {
    for c in clients {
        for (k, p) in state.global_experts.iter().enumerate() {
            c.set_expert_params(k, p)?;
        }
        if let Some(a) = &state.global_attention {
            c.set_attention_params(a)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundConfig {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub participation: f64,
    pub aggregate_attention: bool,
    /// Train clients one after another on the calling thread.
    pub sequential: bool,
}

/// Per-round monitoring of the committed client models.
pub trait RoundEvaluator {
    fn evaluate(&self, round: usize, clients: &[ClientModel]) -> Result<AttackEval>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based index of the round just completed.
    pub round: usize,
    pub participants: Vec<usize>,
    /// Final-epoch mean local objective per participating client.
    pub local_losses: BTreeMap<usize, f64>,
    pub clean_accuracy: Option<f64>,
    pub adversarial_accuracy: Option<f64>,
    pub defended_samples: usize,
    pub wall_time_s: f64,
}

impl RoundReport {
    pub fn mean_local_loss(&self) -> f64 {
        if self.local_losses.is_empty() {
            return f64::NAN;
        }
        self.local_losses.values().sum::<f64>() / self.local_losses.len() as f64
    }
}

/// What a client sends to the server after local training.
struct Upload {
    client_id: usize,
    experts: Vec<ParamSet>,
    attention: Option<ParamSet>,
    num_samples: usize,
    report: LocalReport,
}

struct Trained {
    index: usize,
    model: ClientModel,
}

fn train_client(
    index: usize,
    model: &ClientModel,
    data: &ClientDataset,
    cfg: &RoundConfig,
    hook: Option<&dyn DefenseHook>,
    seed: u64,
    uplink: &mpsc::Sender<Upload>,
) -> Result<Trained> {
    let id = model.client_id();
    let wrap = |e: Error| Error::Client {
        client_id: id,
        source: Box::new(e),
    };
    let mut local = model.deep_clone().map_err(wrap)?;
    let report = local_update(&mut local, data, &cfg.train, &cfg.loss, hook, seed).map_err(wrap)?;
    let experts = (0..local.num_experts())
        .map(|k| local.expert_params(k))
        .collect::<Result<Vec<_>>>()
        .map_err(wrap)?;
    let attention = if cfg.aggregate_attention {
        Some(local.attention_params().map_err(wrap)?)
    } else {
        None
    };
    uplink
        .send(Upload {
            client_id: id,
            experts,
            attention,
            num_samples: data.len(),
            report,
        })
        .expect("server hung up during a round");
    Ok(Trained { index, model: local })
}

/// One communication round: local training on the sampled clients,
/// aggregation, broadcast, optional evaluation. Client models and `state`
/// are only updated if every step succeeds.
pub fn run_round(
    state: &mut FederationState,
    clients: &mut [ClientModel],
    datasets: &[ClientDataset],
    cfg: &RoundConfig,
    hook: Option<&dyn DefenseHook>,
    evaluator: Option<&dyn RoundEvaluator>,
    seed: u64,
) -> Result<RoundReport> {
    let start = Instant::now();
    if clients.len() != datasets.len() || clients.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} client models for {} datasets",
            clients.len(),
            datasets.len()
        )));
    }
    for (c, d) in clients.iter().zip(datasets) {
        if c.client_id() != d.client_id() {
            return Err(Error::InvalidArgument(format!(
                "client model {} paired with dataset of client {}",
                c.client_id(),
                d.client_id()
            )));
        }
    }
    let round = state.round + 1;
    let round_seed = mix(seed, round as u64);
    let n = clients.len();
    let m = ((cfg.participation * n as f64).ceil() as usize).clamp(1, n);
    let mut chosen: Vec<usize> = if m == n {
        (0..n).collect()
    } else {
        sample(&mut rng_from(mix(round_seed, u64::MAX)), n, m).into_vec()
    };
    chosen.sort_by_key(|&i| clients[i].client_id());

    // Work on copies; `clients` is only touched at commit.
    let mut staged: Vec<ClientModel> = clients.iter().map(|c| c.deep_clone()).collect::<Result<_>>()?;
    broadcast(state, &staged)?;
    let (uplink, server) = mpsc::channel();
    let client_seed = |i: usize| mix(round_seed, clients[i].client_id() as u64);
    let trained: Vec<Trained> = if cfg.sequential {
        chosen
            .iter()
            .map(|&i| train_client(i, &staged[i], &datasets[i], cfg, hook, client_seed(i), &uplink))
            .collect::<Result<_>>()?
    } else {
        let clients_ref = &staged;
        std::thread::scope(|s| {
            let handles: Vec<_> = chosen
                .iter()
                .map(|&i| {
                    let uplink = uplink.clone();
                    let seed = client_seed(i);
                    s.spawn(move || train_client(i, &clients_ref[i], &datasets[i], cfg, hook, seed, &uplink))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("client thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    };
    drop(uplink);
    let mut uploads: Vec<Upload> = server.into_iter().collect();
    uploads.sort_by_key(|u| u.client_id);

    let k = state.global_experts.len();
    let global_experts = (0..k)
        .map(|e| {
            let list: Vec<(usize, &ParamSet, f64)> = uploads
                .iter()
                .map(|u| (u.client_id, &u.experts[e], u.num_samples as f64))
                .collect();
            fedavg(&list)
        })
        .collect::<Result<Vec<_>>>()?;
    let global_attention = if cfg.aggregate_attention {
        let list = uploads
            .iter()
            .map(|u| {
                let a = u.attention.as_ref().expect("attention uploaded when aggregated");
                (u.client_id, a, u.num_samples as f64)
            })
            .collect::<Vec<_>>();
        Some(fedavg(&list)?)
    } else {
        None
    };
    let next = FederationState {
        round,
        global_experts,
        global_attention,
        sample_counts: state.sample_counts.clone(),
    };

    for t in trained {
        staged[t.index] = t.model;
    }
    broadcast(&next, &staged)?;
    let eval = evaluator.map(|e| e.evaluate(round, &staged)).transpose()?;

    let report = RoundReport {
        round,
        participants: uploads.iter().map(|u| u.client_id).collect(),
        local_losses: uploads
            .iter()
            .map(|u| (u.client_id, u.report.epoch_losses.last().copied().unwrap_or(f64::NAN)))
            .collect(),
        clean_accuracy: eval.map(|e| e.clean_accuracy),
        adversarial_accuracy: eval.map(|e| e.adversarial_accuracy),
        defended_samples: uploads.iter().map(|u| u.report.defended_samples).sum(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    for (c, s) in clients.iter_mut().zip(staged) {
        *c = s;
    }
    *state = next;
    Ok(report)
}

/// Federated empirical risk `sum_i (n_i / n) F_i`, with `F_i` the mean
/// cross-entropy of client `i`'s model on its own data.
pub fn federated_risk(clients: &[ClientModel], datasets: &[ClientDataset], batch_size: usize) -> Result<f64> {
    let plain = LossConfig { beta: 0.0, gamma: 0.0 };
    let n: usize = datasets.iter().map(|d| d.len()).sum();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut risk = 0.0;
    for (c, d) in clients.iter().zip(datasets) {
        let mut sum = 0.0;
        for chunk in d.samples().chunks(batch_size.max(1)) {
            let x = batch_images(chunk.iter().map(|s| &s.image), c.dtype(), c.device())?;
            let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
            sum += scalar(&c.client_loss(&x, &labels, &plain)?.total)?;
        }
        let f_i = sum / d.len() as f64;
        risk += d.len() as f64 / n as f64 * f_i;
    }
    Ok(risk)
}
