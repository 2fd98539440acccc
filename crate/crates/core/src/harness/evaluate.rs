use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{auroc, write_text, ResultRow, ResultsTable};
use crate::attack::{attack_samples, AttackConfig, Norm};
use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::federation::{load_clients, load_defense, prepare_data, DTYPE};
use crate::moe::ClientModel;
use crate::pipeline::{batch_defend, write_traces, Defense, DefenseSummary, DefenseTrace};
use crate::seed::SeedTree;

pub const REFERENCE_FOOTER: &str = "Reference (full-scale published results, not reproducible at this scale; \
clean / adversarial accuracy in %): Br35H under L-inf PGD (K=7, eps=0.015): \
pFedDef 98.33 / 49.50, detect+purify defense 97.67 / 87.33. \
CIFAR-10 under L2 PGD: detect+purify defense 82.31 / 69.13.";

const CELLS: [(&str, &str); 4] = [
    ("undefended", "clean"),
    ("undefended", "adversarial"),
    ("defended", "clean"),
    ("defended", "adversarial"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub table: ResultsTable,
    /// Keyed `"<method>/<split>"`.
    pub summaries: BTreeMap<String, DefenseSummary>,
    pub detector_auroc: f64,
    pub clean_scores: Vec<f64>,
    pub adversarial_scores: Vec<f64>,
}

impl Evaluation {
    pub fn undefended(&self) -> &ResultRow {
        self.table.row("undefended").expect("evaluation has an undefended row")
    }

    pub fn defended(&self) -> &ResultRow {
        self.table.row("defended").expect("evaluation has a defended row")
    }
}

fn dataset_name(cfg: &ExperimentConfig) -> String {
    match (cfg.dataset.name, &cfg.dataset.path) {
        (DatasetKind::Synthetic, _) => "synthetic".into(),
        (DatasetKind::Cifar10, _) => "cifar10".into(),
        (DatasetKind::Folder, Some(p)) => p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "folder".into()),
        (DatasetKind::Folder, None) => "folder".into(),
    }
}

pub(crate) fn describe_attack(a: &AttackConfig) -> String {
    let norm = match a.norm {
        Norm::Linf => "linf",
        Norm::L2 => "l2",
    };
    format!(
        "pgd-{norm} eps={} alpha={} steps={}{}",
        a.eps,
        a.alpha,
        a.steps,
        if a.random_start { " random-start" } else { "" }
    )
}

/// Traces of the four cells, each concatenated over clients in id order.
fn run_cells(
    cfg: &ExperimentConfig,
    attack: &AttackConfig,
    test: &[Vec<Sample>],
    clients: &[ClientModel],
    defense: &Defense,
    seeds: &SeedTree,
) -> Result<[Vec<DefenseTrace>; 4]> {
    let per_client = match cfg.eval.max_samples {
        0 => usize::MAX,
        m => m.div_ceil(clients.len().max(1)),
    };
    let bs = cfg.eval.batch_size;
    let mut cells: [Vec<DefenseTrace>; 4] = Default::default();
    for (c, (model, share)) in clients.iter().zip(test).enumerate() {
        let share = &share[..share.len().min(per_client)];
        if share.is_empty() {
            continue;
        }
        let adv = attack_samples(model, share, attack, bs, DTYPE, seeds.item("attack.eval", c as u64))?;
        for (i, (method, split)) in CELLS.iter().enumerate() {
            let input = if *split == "clean" { share } else { &adv[..] };
            let d = (*method == "defended").then_some(defense);
            cells[i].extend(batch_defend(input, d, model, bs)?.0);
        }
    }
    if cells[0].is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(cells)
}

fn table_from_cells(
    cfg: &ExperimentConfig,
    attack: &AttackConfig,
    cells: &[Vec<DefenseTrace>; 4],
) -> Result<(ResultsTable, BTreeMap<String, DefenseSummary>, f64)> {
    let mut summaries = BTreeMap::new();
    for ((method, split), traces) in CELLS.iter().zip(cells) {
        summaries.insert(format!("{method}/{split}"), DefenseSummary::from_traces(traces)?);
    }
    let clean: Vec<f64> = cells[2].iter().map(|t| t.score).collect();
    let adv: Vec<f64> = cells[3].iter().map(|t| t.score).collect();
    let det_auroc = auroc(&clean, &adv)?;
    let rows = ["undefended", "defended"]
        .iter()
        .map(|m| {
            let c = &summaries[&format!("{m}/clean")];
            let a = &summaries[&format!("{m}/adversarial")];
            ResultRow {
                method: m.to_string(),
                dataset: dataset_name(cfg),
                attack: describe_attack(attack),
                clean_accuracy: c.accuracy,
                adversarial_accuracy: a.accuracy,
                clean_flag_rate: c.flag_rate,
                adversarial_flag_rate: a.flag_rate,
                detector_auroc: (*m == "defended").then_some(det_auroc),
                samples: c.samples,
                config_hash: cfg.hash(),
                seed: cfg.seed,
            }
        })
        .collect();
    Ok((ResultsTable { rows }, summaries, det_auroc))
}

/// Evaluates {undefended, defended} x {clean, adversarial} on the test split
/// of a trained run and writes `results.csv`, `traces.csv`, `scores.csv`,
/// `summary.json` and `report.md` into `run_dir`.
pub fn evaluate_run(cfg: &ExperimentConfig, run_dir: &Path) -> Result<Evaluation> {
    let clients = load_clients(cfg, run_dir)?;
    let defense = load_defense(cfg, run_dir)?;
    let data = prepare_data(cfg)?;
    let seeds = SeedTree::new(cfg.seed);
    let cells = run_cells(cfg, &cfg.attack, &data.test, &clients, &defense, &seeds)?;
    let (table, summaries, det_auroc) = table_from_cells(cfg, &cfg.attack, &cells)?;

    table.write_csv(&run_dir.join("results.csv"))?;
    let traces = run_dir.join("traces.csv");
    for (i, ((method, split), t)) in CELLS.iter().zip(&cells).enumerate() {
        write_traces(&traces, &format!("{method}/{split}"), t, i > 0)?;
    }
    let mut scores = String::from("split,score\n");
    for (split, t) in [("clean", &cells[2]), ("adversarial", &cells[3])] {
        for tr in t {
            scores.push_str(&format!("{split},{:.9e}\n", tr.score));
        }
    }
    write_text(&run_dir.join("scores.csv"), &scores)?;
    let eval = Evaluation {
        table,
        summaries,
        detector_auroc: det_auroc,
        clean_scores: cells[2].iter().map(|t| t.score).collect(),
        adversarial_scores: cells[3].iter().map(|t| t.score).collect(),
    };
    let path = run_dir.join("summary.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&eval.summaries)?).map_err(|e| Error::io(&path, e))?;
    write_text(&run_dir.join("report.md"), &report(cfg, run_dir, &eval)?)?;
    Ok(eval)
}

fn report(cfg: &ExperimentConfig, run_dir: &Path, eval: &Evaluation) -> Result<String> {
    let mut s = format!(
        "# Evaluation\n\nconfig hash `{}`, seed {}\n\n{}\nDetector AUROC (clean vs adversarial): {:.4}\n\n",
        cfg.hash(),
        cfg.seed,
        eval.table.to_markdown(),
        eval.detector_auroc
    );
    s.push_str("| Cell | Accuracy | Flag rate | Mean t* |\n|---|---|---|---|\n");
    for (k, v) in &eval.summaries {
        s.push_str(&format!(
            "| {k} | {:.4} | {:.4} | {:.2} |\n",
            v.accuracy, v.flag_rate, v.mean_t_star
        ));
    }
    let rounds = super::convergence_series(&run_dir.join("rounds.csv")).unwrap_or_default();
    if !rounds.is_empty() {
        s.push_str("\n## Rounds\n\n| Round | Clean | Adversarial |\n|---|---|---|\n");
        for (r, c, a) in rounds {
            s.push_str(&format!("| {r} | {c:.4} | {a:.4} |\n"));
        }
    }
    s.push_str(&format!("\n{REFERENCE_FOOTER}\n"));
    Ok(s)
}

/// Undefended and defended accuracy for each budget in `eps`; the step size
/// scales with the budget. Writes `sweep.csv`.
pub fn attack_sweep(cfg: &ExperimentConfig, run_dir: &Path, eps: &[f64]) -> Result<ResultsTable> {
    if eps.is_empty() {
        return Err(Error::InvalidArgument("attack sweep needs at least one budget".into()));
    }
    let clients = load_clients(cfg, run_dir)?;
    let defense = load_defense(cfg, run_dir)?;
    let data = prepare_data(cfg)?;
    let seeds = SeedTree::new(cfg.seed);
    let mut out = ResultsTable::default();
    for &e in eps {
        let attack = AttackConfig {
            eps: e,
            alpha: cfg.attack.alpha * e / cfg.attack.eps,
            ..cfg.attack
        };
        attack.validate()?;
        let cells = run_cells(cfg, &attack, &data.test, &clients, &defense, &seeds)?;
        out.rows.extend(table_from_cells(cfg, &attack, &cells)?.0.rows);
    }
    out.write_csv(&run_dir.join("sweep.csv"))?;
    Ok(out)
}
