//! End-to-end checks of the pipeline at a tiny experiment scale, plus the
//! binary's surface (print-config, verify-install).

use std::path::Path;
use std::process::Command;

use l96uq_cli::config::{ExperimentConfig, Scenario};
use l96uq_cli::manifest::{sha256_hex, Manifest};
use l96uq_cli::pipeline;

/// Much smaller than --quick so the whole suite stays fast.
fn tiny_config(scenario: Scenario) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default().quick();
    cfg.scenario = scenario;
    cfg.assim.cycles = 260;
    cfg.assim.spinup_cycles = 40;
    cfg.assim.n_members = 12;
    cfg.split.train = 140;
    cfg.split.validation = 40;
    cfg.split.test = 35;
    cfg.train.max_epochs = 30;
    cfg.train.eval_every_epochs = 10;
    cfg.train.patience = 1;
    cfg.train.lr_grid = vec![1e-3];
    cfg.train.wd_grid = vec![0.0];
    cfg.train.repeats = 1;
    cfg.train.hidden = vec![8];
    cfg.leadtime.output_leads = vec![4, 8];
    cfg
}

fn run_all(cfg: &ExperimentConfig, dir: &Path) {
    pipeline::cmd_nature(cfg, dir).unwrap();
    pipeline::cmd_assimilate(cfg, dir).unwrap();
    pipeline::cmd_forecast(cfg, dir).unwrap();
    pipeline::cmd_train(cfg, dir).unwrap();
    pipeline::cmd_evaluate(cfg, dir).unwrap();
}

#[test]
fn pms_pipeline_produces_complete_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(Scenario::Pms);
    run_all(&cfg, dir.path());

    for name in [
        "nature.l96a",
        "analysis_mean.l96a",
        "analysis_members.l96a",
        "forecast_truth.l96a",
        "model_mean.l96a",
        "metrics.csv",
        "pit_counts.csv",
    ] {
        assert!(dir.path().join(name).exists(), "missing artifact {name}");
    }

    // manifest completeness: recorded hashes match the files on disk
    for command in ["nature", "assimilate", "forecast", "train", "evaluate"] {
        let m = Manifest::load(dir.path(), command).unwrap();
        assert!(!m.artifacts.is_empty());
        for a in &m.artifacts {
            let bytes = std::fs::read(dir.path().join(&a.name)).unwrap();
            assert_eq!(sha256_hex(&bytes), a.sha256, "hash mismatch for {}", a.name);
            assert_eq!(bytes.len() as u64, a.bytes);
        }
    }

    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    for system in ["det", "ens", "nn-mse", "nn-ext", "nn-lik"] {
        assert!(metrics.contains(system), "metrics missing system {system}");
    }
    // the static-sigma baseline must not report a correlation
    let det_row = metrics.lines().find(|l| l.starts_with("det,")).unwrap();
    assert!(det_row.contains("not-applicable"));
}

#[test]
fn ims_pipeline_fits_surrogate_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(Scenario::Ims);
    run_all(&cfg, dir.path());

    let fit = std::fs::read_to_string(dir.path().join("surrogate_fit.toml")).unwrap();
    assert!(fit.contains("alpha"));
    // the fitted closure must damp, not amplify, the slow variables
    let alpha: f64 = fit
        .lines()
        .find(|l| l.starts_with("alpha"))
        .and_then(|l| l.split('=').nth(1))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(alpha < 1.0, "closure slope {alpha} would destabilize the surrogate");
}

#[test]
fn leadtime_study_writes_one_row_per_input_stack() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(Scenario::Pms);
    cfg.leadtime.output_leads = vec![4, 8];
    pipeline::cmd_nature(&cfg, dir.path()).unwrap();
    pipeline::cmd_assimilate(&cfg, dir.path()).unwrap();
    pipeline::cmd_leadtime_study(&cfg, dir.path()).unwrap();
    let table = std::fs::read_to_string(dir.path().join("leadtime_rmse.csv")).unwrap();
    let expected: usize = cfg
        .leadtime
        .output_leads
        .iter()
        .map(|&l| pipeline::leadtime_input_configs(l, cfg.assim.obs_every).len())
        .sum();
    assert_eq!(table.lines().count(), 1 + expected);
}

#[test]
fn print_config_round_trips_through_the_binary() {
    let out = Command::new(env!("CARGO_BIN_EXE_l96uq"))
        .args(["print-config", "--quick"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let parsed: ExperimentConfig = toml::from_str(&text).unwrap();
    assert_eq!(parsed.to_toml(), text);
}

#[test]
fn verify_install_reports_all_checks() {
    let out = Command::new(env!("CARGO_BIN_EXE_l96uq")).arg("verify-install").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("ok: ")).count(), 4);
}

#[test]
fn seed_changes_propagate_to_artifacts() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(Scenario::Pms);
    pipeline::cmd_nature(&cfg, d1.path()).unwrap();
    cfg.master_seed = 1;
    pipeline::cmd_nature(&cfg, d2.path()).unwrap();
    let a = std::fs::read(d1.path().join("nature.l96a")).unwrap();
    let b = std::fs::read(d2.path().join("nature.l96a")).unwrap();
    assert_ne!(a, b);
}
