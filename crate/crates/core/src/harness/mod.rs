//! Experiment harness: evaluation of the four defense cells, result tables,
//! detector AUROC and plots.

mod evaluate;
mod plot;

pub use evaluate::{attack_sweep, evaluate_run, Evaluation, REFERENCE_FOOTER};
pub use plot::{convergence_series, emit_plots, read_scores};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability that a random adversarial score exceeds a random clean score,
/// ties counting one half. Computed from midranks of the pooled scores.
pub fn auroc(clean: &[f64], adversarial: &[f64]) -> Result<f64> {
    if clean.is_empty() || adversarial.is_empty() {
        return Err(Error::InvalidArgument("auroc needs non-empty score sets".into()));
    }
    if clean.iter().chain(adversarial).any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("auroc scores must not be NaN".into()));
    }
    let mut pooled: Vec<(f64, bool)> = clean
        .iter()
        .map(|&s| (s, false))
        .chain(adversarial.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut adv_rank_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        adv_rank_sum += mid * pooled[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let (na, nc) = (adversarial.len() as f64, clean.len() as f64);
    Ok((adv_rank_sum - na * (na + 1.0) / 2.0) / (na * nc))
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub dataset: String,
    pub attack: String,
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub clean_flag_rate: f64,
    pub adversarial_flag_rate: f64,
    pub detector_auroc: Option<f64>,
    pub samples: usize,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "method",
            "dataset",
            "attack",
            "clean_accuracy",
            "adversarial_accuracy",
            "clean_flag_rate",
            "adversarial_flag_rate",
            "detector_auroc",
            "samples",
            "config_hash",
            "seed",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.dataset.clone(),
                r.attack.clone(),
                format!("{:.6}", r.clean_accuracy),
                format!("{:.6}", r.adversarial_accuracy),
                format!("{:.6}", r.clean_flag_rate),
                format!("{:.6}", r.adversarial_flag_rate),
                r.detector_auroc.map(|a| format!("{a:.6}")).unwrap_or_default(),
                r.samples.to_string(),
                r.config_hash.clone(),
                r.seed.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad number {:?} in {}", &rec[i], path.display())))
            };
            rows.push(ResultRow {
                method: rec[0].to_string(),
                dataset: rec[1].to_string(),
                attack: rec[2].to_string(),
                clean_accuracy: num(3)?,
                adversarial_accuracy: num(4)?,
                clean_flag_rate: num(5)?,
                adversarial_flag_rate: num(6)?,
                detector_auroc: if rec[7].is_empty() { None } else { Some(num(7)?) },
                samples: num(8)? as usize,
                config_hash: rec[9].to_string(),
                seed: num(10)? as u64,
            });
        }
        Ok(Self { rows })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| Method | Dataset | Attack | Clean Acc. (%) | Adv. Acc. (%) |\n|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {:.2} | {:.2} |\n",
                r.method,
                r.dataset,
                r.attack,
                100.0 * r.clean_accuracy,
                100.0 * r.adversarial_accuracy
            ));
        }
        s
    }

    pub fn row(&self, method: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use proptest::prelude::*;
    use rand::Rng as _;

    /// Exhaustive pair count.
    fn pair_oracle(clean: &[f64], adv: &[f64]) -> f64 {
        let mut s = 0.0;
        for &a in adv {
            for &c in clean {
                s += if a > c {
                    1.0
                } else if a == c {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (clean.len() * adv.len()) as f64
    }

    #[test]
    fn auroc_hand_cases() {
        assert_eq!(auroc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(auroc(&[1.0, 1.0], &[1.0]).unwrap(), 0.5);
        assert!(auroc(&[], &[1.0]).is_err());
        assert!(auroc(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn auroc_identical_distributions_near_half() {
        let mut rng = rng_from(4);
        let a: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
        assert!((auroc(&a, &b).unwrap() - 0.5).abs() < 0.03);
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_count(
            clean in prop::collection::vec(0u8..6, 1..30),
            adv in prop::collection::vec(0u8..6, 1..30),
        ) {
            let c: Vec<f64> = clean.iter().map(|&v| v as f64).collect();
            let a: Vec<f64> = adv.iter().map(|&v| v as f64).collect();
            prop_assert!((auroc(&c, &a).unwrap() - pair_oracle(&c, &a)).abs() < 1e-12);
        }
    }

    fn row(method: &str) -> ResultRow {
        ResultRow {
            method: method.into(),
            dataset: "synthetic".into(),
            attack: "linf eps=0.015".into(),
            clean_accuracy: 0.9,
            adversarial_accuracy: 0.25,
            clean_flag_rate: 0.05,
            adversarial_flag_rate: 0.8,
            detector_auroc: Some(0.91),
            samples: 500,
            config_hash: "ab".repeat(32),
            seed: 3,
        }
    }

    #[test]
    fn results_csv_roundtrip() {
        let t = ResultsTable {
            rows: vec![row("undefended"), row("defended")],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("results.csv");
        t.write_csv(&p).unwrap();
        assert_eq!(ResultsTable::read_csv(&p).unwrap(), t);
        let md = t.to_markdown();
        assert!(md.contains("| defended | synthetic | linf eps=0.015 | 90.00 | 25.00 |"));
    }
}
