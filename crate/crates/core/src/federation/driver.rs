//! Three-phase training driver: purifier pretraining, detector training and
//! calibration, then federated optimization of the client classifiers.
//!
//! Each phase writes its artifacts into its own subdirectory of the run
//! directory and finishes by writing a `DONE` marker holding the config hash.
//! A resumed run skips every phase whose marker is present.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{run_round, FederationState, RoundConfig, RoundEvaluator, RoundReport};
use crate::attack::{attack_samples, predict_samples, AttackEval};
use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::synthetic::generate;
use crate::data::{load_dataset, partition_clients, select_classes, split_fractions, subsample, ClientDataset, LoadOptions, Sample, Split};
use crate::diffusion::{train_diffusion, UNet};
use crate::error::{Error, Result};
use crate::mae::{calibrate_threshold, score_samples, train_mae, Calibration, MaeModel};
use crate::moe::{ClientModel, DefenseHook};
use crate::pipeline::{detector_seed, Defense};
use crate::seed::{rng_from, SeedTree};

pub const DTYPE: DType = DType::F32;
const TEST_ID_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Purifier,
    Detector,
    Federated,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Purifier, Phase::Detector, Phase::Federated];

    pub fn dir_name(self) -> &'static str {
        match self {
            Phase::Purifier => "phase1_purifier",
            Phase::Detector => "phase2_detector",
            Phase::Federated => "phase3_federated",
        }
    }

    pub fn dir(self, run_dir: &Path) -> PathBuf {
        run_dir.join(self.dir_name())
    }

    /// Files that must exist once the phase is complete.
    fn artifacts(self, run_dir: &Path, n_clients: usize) -> Vec<PathBuf> {
        let d = self.dir(run_dir);
        match self {
            Phase::Purifier => vec![d.join("unet.safetensors"), d.join("unet.json")],
            Phase::Detector => vec![d.join("mae.safetensors"), d.join("mae.json"), d.join("calibration.json")],
            Phase::Federated => {
                let mut v: Vec<PathBuf> = (0..n_clients)
                    .map(|c| client_dir(run_dir, c).join("manifest.json"))
                    .collect();
                v.push(run_dir.join("rounds.csv"));
                v
            }
        }
    }

    fn is_done(self, run_dir: &Path) -> bool {
        self.dir(run_dir).join("DONE").is_file()
    }

    fn mark_done(self, run_dir: &Path, hash: &str) -> Result<()> {
        let path = self.dir(run_dir).join("DONE");
        fs::write(&path, hash).map_err(|e| Error::io(&path, e))
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.dir_name())
    }
}

fn client_dir(run_dir: &Path, client: usize) -> PathBuf {
    Phase::Federated.dir(run_dir).join(format!("client_{client}"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Skip phases that already finished in the run directory.
    pub resume: bool,
    /// Train clients one after another (bit-reproducible).
    pub sequential: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingArtifacts {
    pub run_dir: PathBuf,
    pub executed: Vec<Phase>,
    pub skipped: Vec<Phase>,
    /// Reports of the rounds run in this invocation.
    pub rounds: Vec<RoundReport>,
    pub tau: f64,
}

/// Data splits shared by every phase.
#[derive(Debug, Clone)]
pub struct PreparedData {
    /// Client training sets (their union trains the purifier and detector).
    pub clients: Vec<ClientDataset>,
    /// Held-out clean images for threshold calibration.
    pub validation: Vec<Sample>,
    /// Test images per client, drawn to follow that client's label mix.
    pub test: Vec<Vec<Sample>>,
}

impl PreparedData {
    pub fn pool(&self) -> Vec<Sample> {
        self.clients.iter().flat_map(|c| c.samples().iter().cloned()).collect()
    }

    pub fn test_all(&self) -> Vec<Sample> {
        let mut all: Vec<Sample> = self.test.iter().flatten().cloned().collect();
        all.sort_by_key(|s| s.id);
        all
    }
}

fn reid(samples: &mut [Sample], offset: u64) {
    for (i, s) in samples.iter_mut().enumerate() {
        s.id = offset + i as u64;
    }
}

fn load_source(cfg: &ExperimentConfig, seeds: &SeedTree) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let d = &cfg.dataset;
    let opts = LoadOptions {
        channels: cfg.model.in_channels,
        ..LoadOptions::new(d.image_size)
    };
    let keep = |s: Vec<Sample>| if d.classes.is_empty() { s } else { select_classes(s, &d.classes) };
    let cap = |s: Vec<Sample>, n: usize, stream: &str| if n == 0 { s } else { subsample(s, n, seeds.stream(stream)) };
    let (train, test) = match d.name {
        DatasetKind::Synthetic => (
            generate(&d.synthetic, d.n_train, seeds.stream("data.train"))?,
            generate(&d.synthetic, d.n_test, seeds.stream("data.test"))?,
        ),
        DatasetKind::Cifar10 | DatasetKind::Folder => {
            let path = d.path.as_deref().expect("validated: path present");
            let has_test = d.name == DatasetKind::Cifar10 || path.join("test").is_dir();
            if has_test {
                (
                    keep(load_dataset(path, Split::Train, &opts)?),
                    keep(load_dataset(path, Split::Test, &opts)?),
                )
            } else {
                let all = keep(load_dataset(path, Split::All, &opts)?);
                let (train, _, test) = split_fractions(all, 0.0, d.test_fraction, seeds.stream("data.split"))?;
                (train, test)
            }
        }
    };
    Ok((cap(train, d.n_train, "data.train.cap"), cap(test, d.n_test, "data.test.cap")))
}

/// Loads, splits and partitions the dataset; deterministic in the seed.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let seeds = SeedTree::new(cfg.seed);
    let (mut train, mut test) = load_source(cfg, &seeds)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    reid(&mut train, 0);
    reid(&mut test, TEST_ID_OFFSET);
    let (train, validation, _) = split_fractions(train, cfg.dataset.val_fraction, 0.0, seeds.stream("data.val"))?;
    let clients = partition_clients(train, cfg.fed.n_clients, cfg.partition, seeds.stream("data.partition"))?;
    let test = assign_test(test, &clients, cfg.model.num_classes, seeds.stream("data.test.assign"));
    Ok(PreparedData {
        clients,
        validation,
        test,
    })
}

/// Sends each test image to a client with probability proportional to that
/// client's share of the image's label in the training partition.
fn assign_test(mut test: Vec<Sample>, clients: &[ClientDataset], num_classes: usize, seed: u64) -> Vec<Vec<Sample>> {
    let mut counts = vec![vec![0usize; clients.len()]; num_classes.max(1)];
    for (c, d) in clients.iter().enumerate() {
        for s in d.samples() {
            if s.label < counts.len() {
                counts[s.label][c] += 1;
            }
        }
    }
    test.sort_by_key(|s| s.id);
    let mut rng = rng_from(seed);
    let mut out = vec![Vec::new(); clients.len()];
    for s in test {
        let row = counts.get(s.label).filter(|r| r.iter().sum::<usize>() > 0);
        let c = match row {
            Some(r) => {
                let mut u = rng.random_range(0..r.iter().sum::<usize>());
                r.iter().position(|&n| {
                    if u < n {
                        true
                    } else {
                        u -= n;
                        false
                    }
                })
                .expect("u below row total")
            }
            None => rng.random_range(0..clients.len()),
        };
        out[c].push(s);
    }
    out
}

/// Attack and score every client's test share against that client's model.
/// Accuracies are pooled over all evaluated samples.
pub fn evaluate_clients(
    clients: &[ClientModel],
    test: &[Vec<Sample>],
    cfg: &ExperimentConfig,
    max_samples: usize,
    seed: u64,
) -> Result<AttackEval> {
    let per_client = if max_samples == 0 {
        usize::MAX
    } else {
        max_samples.div_ceil(clients.len().max(1))
    };
    let (mut clean, mut adv, mut n) = (0usize, 0usize, 0usize);
    for (c, (model, share)) in clients.iter().zip(test).enumerate() {
        let share = &share[..share.len().min(per_client)];
        if share.is_empty() {
            continue;
        }
        let truth: Vec<usize> = share.iter().map(|s| s.label).collect();
        let attacked = attack_samples(model, share, &cfg.attack, cfg.eval.batch_size, DTYPE, crate::seed::mix(seed, c as u64))?;
        let hits = |pred: Vec<usize>| pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
        clean += hits(predict_samples(model, share, cfg.eval.batch_size, DTYPE)?);
        adv += hits(predict_samples(model, &attacked, cfg.eval.batch_size, DTYPE)?);
        n += share.len();
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(AttackEval {
        clean_accuracy: clean as f64 / n as f64,
        adversarial_accuracy: adv as f64 / n as f64,
    })
}

struct MonitorRounds<'a> {
    cfg: &'a ExperimentConfig,
    test: &'a [Vec<Sample>],
    seeds: SeedTree,
}

impl RoundEvaluator for MonitorRounds<'_> {
    fn evaluate(&self, round: usize, clients: &[ClientModel]) -> Result<AttackEval> {
        evaluate_clients(
            clients,
            self.test,
            self.cfg,
            self.cfg.fed.eval_samples,
            self.seeds.item("attack.round", round as u64),
        )
    }
}

/// Loads the phase-1 purifier and phase-2 detector into a defense stack.
pub fn load_defense(cfg: &ExperimentConfig, run_dir: &Path) -> Result<Defense> {
    for phase in [Phase::Purifier, Phase::Detector] {
        require(phase, run_dir, cfg.fed.n_clients)?;
    }
    let purifier = UNet::load(&Phase::Purifier.dir(run_dir), DTYPE)?;
    let detector = MaeModel::load(&Phase::Detector.dir(run_dir), DTYPE)?;
    let calibration = Calibration::load(&Phase::Detector.dir(run_dir).join("calibration.json"))?;
    Ok(Defense {
        detector,
        calibration,
        purifier: Box::new(purifier),
        schedule: cfg.diffusion.schedule()?,
        policy: cfg.purify,
        scoring: cfg.detector,
        mask_ratio: cfg.mae.mask_ratio,
        seed: SeedTree::new(cfg.seed).stream("defense"),
    })
}

/// Loads the committed client models of phase 3, ordered by client id.
pub fn load_clients(cfg: &ExperimentConfig, run_dir: &Path) -> Result<Vec<ClientModel>> {
    require(Phase::Federated, run_dir, cfg.fed.n_clients)?;
    (0..cfg.fed.n_clients)
        .map(|c| ClientModel::load(&client_dir(run_dir, c), DTYPE))
        .collect()
}

fn require(phase: Phase, run_dir: &Path, n_clients: usize) -> Result<()> {
    for path in phase.artifacts(run_dir, n_clients) {
        if !path.is_file() {
            return Err(Error::MissingArtifact {
                phase: phase.to_string(),
                path,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    package: &'static str,
    version: &'static str,
    config_hash: String,
    seed: u64,
    sequential: bool,
    phases: &'a [Phase],
}

fn write_manifest(cfg: &ExperimentConfig, run_dir: &Path, opts: &RunOptions, executed: &[Phase]) -> Result<()> {
    let m = RunManifest {
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        sequential: opts.sequential,
        phases: executed,
    };
    let path = run_dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&m)?).map_err(|e| Error::io(&path, e))
}

pub const ROUNDS_HEADER: [&str; 7] = [
    "round",
    "clean_accuracy",
    "adversarial_accuracy",
    "mean_local_loss",
    "participants",
    "defended_samples",
    "wall_time_s",
];

fn append_round(path: &Path, r: &RoundReport) -> Result<()> {
    let fresh = !path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(ROUNDS_HEADER)?;
    }
    let opt = |v: Option<f64>| v.map(|a| format!("{a:.6}")).unwrap_or_default();
    w.write_record([
        r.round.to_string(),
        opt(r.clean_accuracy),
        opt(r.adversarial_accuracy),
        format!("{:.6}", r.mean_local_loss()),
        r.participants.len().to_string(),
        r.defended_samples.to_string(),
        format!("{:.3}", r.wall_time_s),
    ])?;
    w.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))
}

fn run_purifier_phase(cfg: &ExperimentConfig, data: &PreparedData, seeds: &SeedTree, dir: &Path) -> Result<()> {
    let unet = UNet::new(&cfg.diffusion, cfg.model.in_channels, seeds.stream("init.diffusion"), DTYPE)?;
    let report = train_diffusion(&unet, &data.pool(), &cfg.diffusion, seeds.stream("diffusion"))?;
    unet.save(dir)?;
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&path, e))
}

fn run_detector_phase(cfg: &ExperimentConfig, data: &PreparedData, seeds: &SeedTree, dir: &Path) -> Result<Calibration> {
    let mae = MaeModel::new(
        &cfg.mae,
        cfg.model.in_channels,
        cfg.dataset.image_size,
        seeds.stream("init.mae"),
        DTYPE,
    )?;
    let report = train_mae(&mae, &data.pool(), &cfg.mae, seeds.stream("mask"))?;
    mae.save(dir)?;
    let scores = score_samples(
        &mae,
        &data.validation,
        cfg.mae.mask_ratio,
        cfg.detector.score_draws,
        cfg.detector.score_mode,
        detector_seed(seeds.stream("defense")),
        cfg.eval.batch_size,
    )?;
    let calibration = calibrate_threshold(&scores, cfg.detector.kappa)?;
    calibration.save(&dir.join("calibration.json"))?;
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(calibration)
}

fn run_federated_phase(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    seeds: &SeedTree,
    run_dir: &Path,
    opts: &RunOptions,
) -> Result<Vec<RoundReport>> {
    let hook = if cfg.fed.defend_during_training {
        Some(load_defense(cfg, run_dir)?)
    } else {
        None
    };
    let init = ClientModel::new(&cfg.model, 0, seeds.stream("init.model"), DTYPE)?;
    let mut clients: Vec<ClientModel> = data
        .clients
        .iter()
        .map(|d| init.with_client_id(d.client_id()))
        .collect::<Result<_>>()?;
    let mut state = FederationState::new(&init, &data.clients, cfg.fed.aggregate_attention)?;
    let round_cfg = RoundConfig {
        train: cfg.optim.train_config(cfg.fed.local_epochs),
        loss: cfg.loss,
        participation: cfg.fed.participation,
        aggregate_attention: cfg.fed.aggregate_attention,
        sequential: opts.sequential,
    };
    let monitor = MonitorRounds {
        cfg,
        test: &data.test,
        seeds: *seeds,
    };
    let ledger = run_dir.join("rounds.csv");
    if ledger.exists() {
        fs::remove_file(&ledger).map_err(|e| Error::io(&ledger, e))?;
    }
    let mut reports = Vec::with_capacity(cfg.fed.rounds);
    for _ in 0..cfg.fed.rounds {
        let report = run_round(
            &mut state,
            &mut clients,
            &data.clients,
            &round_cfg,
            hook.as_ref().map(|h| h as &dyn DefenseHook),
            Some(&monitor),
            seeds.stream("local"),
        )?;
        tracing::info!(
            round = report.round,
            clean = report.clean_accuracy,
            adversarial = report.adversarial_accuracy,
            loss = report.mean_local_loss(),
            "round complete"
        );
        append_round(&ledger, &report)?;
        for c in &clients {
            c.save(&client_dir(run_dir, c.client_id()), cfg.seed, state.round)?;
        }
        reports.push(report);
    }
    if cfg.fed.rounds == 0 {
        append_round_header(&ledger)?;
        for c in &clients {
            c.save(&client_dir(run_dir, c.client_id()), cfg.seed, 0)?;
        }
    }
    Ok(reports)
}

fn append_round_header(path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ROUNDS_HEADER)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs the phases in order into `run_dir`. The config is validated before
/// anything is written.
pub fn run_training(cfg: &ExperimentConfig, run_dir: &Path, opts: &RunOptions) -> Result<TrainingArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let config_path = run_dir.join("config.toml");
    fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
    let seeds = SeedTree::new(cfg.seed);
    let hash = cfg.hash();
    let data = prepare_data(cfg)?;
    let mut out = TrainingArtifacts {
        run_dir: run_dir.to_path_buf(),
        executed: Vec::new(),
        skipped: Vec::new(),
        rounds: Vec::new(),
        tau: f64::NAN,
    };
    for phase in Phase::ALL {
        if opts.resume && phase.is_done(run_dir) {
            require(phase, run_dir, cfg.fed.n_clients)?;
            tracing::info!(%phase, "already complete, skipping");
            out.skipped.push(phase);
            continue;
        }
        tracing::info!(%phase, "starting");
        let dir = phase.dir(run_dir);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let done = dir.join("DONE");
        if done.exists() {
            fs::remove_file(&done).map_err(|e| Error::io(&done, e))?;
        }
        match phase {
            Phase::Purifier => run_purifier_phase(cfg, &data, &seeds, &dir)?,
            Phase::Detector => out.tau = run_detector_phase(cfg, &data, &seeds, &dir)?.tau,
            Phase::Federated => out.rounds = run_federated_phase(cfg, &data, &seeds, run_dir, opts)?,
        }
        phase.mark_done(run_dir, &hash)?;
        out.executed.push(phase);
    }
    if out.tau.is_nan() {
        out.tau = Calibration::load(&Phase::Detector.dir(run_dir).join("calibration.json"))?.tau;
    }
    write_manifest(cfg, run_dir, opts, &out.executed)?;
    Ok(out)
}
