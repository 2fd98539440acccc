//! Full train / resume / evaluate / plot cycle on the smoke config, plus the
//! failure paths of the phase driver.

use std::path::{Path, PathBuf};

use fedpurify::config::ExperimentConfig;
use fedpurify::federation::{run_training, Phase, RunOptions};
use fedpurify::harness::{emit_plots, evaluate_run, ResultsTable};
use fedpurify::Error;

fn smoke() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    ExperimentConfig::load(&path).unwrap()
}

const SEQUENTIAL: RunOptions = RunOptions {
    resume: false,
    sequential: true,
};

fn resumed() -> RunOptions {
    RunOptions {
        resume: true,
        ..SEQUENTIAL
    }
}

fn rows(path: &Path) -> usize {
    csv::Reader::from_path(path).unwrap().records().count()
}

#[test]
fn train_resume_evaluate_plot() {
    let cfg = smoke();
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();

    let art = run_training(&cfg, run, &SEQUENTIAL).unwrap();
    assert_eq!(art.executed, Phase::ALL.to_vec());
    assert!(art.skipped.is_empty());
    assert_eq!(art.rounds.len(), cfg.fed.rounds);
    assert!(art.tau.is_finite());
    for phase in Phase::ALL {
        assert!(run.join(phase.dir_name()).join("DONE").is_file(), "{phase} not marked done");
    }
    assert_eq!(rows(&run.join("rounds.csv")), cfg.fed.rounds);
    for c in 0..cfg.fed.n_clients {
        assert!(run.join("phase3_federated").join(format!("client_{c}")).is_dir());
    }
    assert!(run.join("manifest.json").is_file());

    let again = run_training(&cfg, run, &resumed()).unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(again.skipped, Phase::ALL.to_vec());
    assert_eq!(again.tau, art.tau);

    let eval = evaluate_run(&cfg, run).unwrap();
    let table = ResultsTable::read_csv(&run.join("results.csv")).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.rows[0].method, "undefended");
    assert_eq!(table.rows[1].method, "defended");
    assert_eq!(eval.undefended().samples, cfg.dataset.n_test);
    for r in &table.rows {
        for v in [r.clean_accuracy, r.adversarial_accuracy, r.clean_flag_rate, r.adversarial_flag_rate] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(r.config_hash, cfg.hash());
    }
    assert_eq!(table.rows[0].clean_flag_rate, 0.0);
    assert!((0.0..=1.0).contains(&eval.detector_auroc));
    for f in ["traces.csv", "scores.csv", "summary.json", "report.md"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    // one trace per sample in each of the four cells
    assert_eq!(rows(&run.join("traces.csv")), 4 * cfg.dataset.n_test);

    let plots = emit_plots(run).unwrap();
    let names: Vec<PathBuf> = plots.iter().map(|p| PathBuf::from(p.file_name().unwrap())).collect();
    assert_eq!(names, [PathBuf::from("convergence.png"), PathBuf::from("detector_scores.png")]);
}

#[test]
fn resume_with_missing_artifact_fails() {
    let cfg = smoke();
    let dir = tempfile::tempdir().unwrap();
    run_training(&cfg, dir.path(), &SEQUENTIAL).unwrap();
    std::fs::remove_file(dir.path().join("phase2_detector/mae.safetensors")).unwrap();
    match run_training(&cfg, dir.path(), &resumed()) {
        Err(Error::MissingArtifact { phase, path }) => {
            assert_eq!(phase, "phase2_detector");
            assert!(path.ends_with("mae.safetensors"));
        }
        other => panic!("expected a missing-artifact error, got {other:?}"),
    }
}

#[test]
fn evaluate_without_training_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(evaluate_run(&smoke(), dir.path()), Err(Error::MissingArtifact { .. })));
}

#[test]
fn invalid_config_is_rejected_before_any_work() {
    let mut cfg = smoke();
    cfg.purify.t_max = cfg.diffusion.steps + 1;
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(matches!(run_training(&cfg, &run, &SEQUENTIAL), Err(Error::Config(_))));
    assert!(!run.exists());

    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")).unwrap();
    let typo = text.replace("[fed]\n", "[fed]\nroundz = 3\n");
    assert!(matches!(ExperimentConfig::from_toml_str(&typo), Err(Error::Config(_))));
}
