use std::path::PathBuf;

use protomoe::cli::{effective_config, load_config, parse_config, ExperimentKind};

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn every_example_config_loads_and_round_trips() {
    let mut kinds = Vec::new();
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("ini") {
            continue;
        }
        let cfg = load_config(&path, None, None, None).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(parse_config(&effective_config(&cfg)).unwrap(), cfg, "{}", path.display());
        kinds.push(cfg.kind);
    }
    for kind in [
        ExperimentKind::Train,
        ExperimentKind::Compare,
        ExperimentKind::Gradcheck,
        ExperimentKind::BalanceStudy,
    ] {
        assert!(kinds.contains(&kind), "no example for {}", kind.key());
    }
}

#[test]
fn binary_reports_missing_config_with_setup_exit_code() {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_protomoe"))
        .args(["run", "/nonexistent/experiment.ini"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(protomoe::cli::EXIT_SETUP_ERROR));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/experiment.ini"));
}

#[test]
fn binary_runs_compare_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_protomoe"))
        .arg("run")
        .arg(configs_dir().join("compare_limited.ini"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("compare.txt")).unwrap();
    assert!(table.starts_with("strategy"));
    assert!(dir.path().join("summary.json").exists());
}
