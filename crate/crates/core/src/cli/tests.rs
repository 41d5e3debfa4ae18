use super::*;
use crate::error::Error;
use crate::routing::{CapacityMode, RoutingKind, RoutingStrategy};

fn parse_err(text: &str) -> (usize, String, String) {
    match parse_config(text) {
        Err(Error::Parse { line, key, message }) => (line, key, message),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn minimal_config_takes_defaults() {
    let c = parse_config("strategy = top1\nN = 4\n").unwrap();
    assert_eq!(c.kind, ExperimentKind::Train);
    assert_eq!(c.train.strategy, RoutingStrategy::top_k(1, 4).unwrap());
    assert_eq!(c.train.capacity_mode, CapacityMode::Standard);
    assert_eq!(c.train.capacity_factor, 1.25);
    assert_eq!(c.train.aux_alpha, 0.01);
    assert_eq!(c.strategies.len(), 5);
    assert_eq!(c.out, None);
}

#[test]
fn sections_and_comments() {
    let text = "\
# experiment file
[experiment]
kind = compare   # inline comment
seed = 7

[model]
N = 8
strategy = ktop1
Z = 2
F = 4
capacity_mode = limited

[compare]
strategies = top1, top2, 2top1
";
    let c = parse_config(text).unwrap();
    assert_eq!(c.kind, ExperimentKind::Compare);
    assert_eq!(c.train.seed, 7);
    assert_eq!(
        c.train.strategy.kind(),
        RoutingKind::KTop1 {
            prototypes: 2,
            experts_per_prototype: 4
        }
    );
    assert_eq!(c.train.capacity_mode, CapacityMode::Limited);
    assert_eq!(c.strategies.iter().map(RoutingStrategy::key).collect::<Vec<_>>(), vec!["top1", "top2", "2top1"]);
}

#[test]
fn prototype_product_must_match_experts() {
    let (line, key, message) = parse_err("strategy = ktop1\nZ = 3\nF = 2\nN = 4\n");
    assert_eq!((line, key.as_str()), (3, "F"));
    assert!(message.contains("Z*F"), "{message}");
}

#[test]
fn duplicate_key_reports_both_lines() {
    let (line, key, message) = parse_err("N = 4\nlr = 0.1\n\nlr = 0.2\n");
    assert_eq!((line, key.as_str()), (4, "lr"));
    assert!(message.contains("line 2"), "{message}");
}

#[test]
fn unknown_key_rejected() {
    let (line, key, _) = parse_err("N = 4\nlearning_rate = 0.1\n");
    assert_eq!((line, key.as_str()), (2, "learning_rate"));
}

#[test]
fn key_in_wrong_section_rejected() {
    let (line, key, message) = parse_err("[model]\nlr = 0.1\n");
    assert_eq!((line, key.as_str()), (2, "lr"));
    assert!(message.contains("[optimizer]"));
}

#[test]
fn type_mismatch_names_key() {
    let (line, key, _) = parse_err("[task]\nbatch = eight\n");
    assert_eq!((line, key.as_str()), (2, "batch"));
    let (_, key, _) = parse_err("moe_attention = yes\n");
    assert_eq!(key, "moe_attention");
    let (_, key, _) = parse_err("kind = sweep\n");
    assert_eq!(key, "kind");
}

#[test]
fn constraint_violations_rejected() {
    assert_eq!(parse_err("M = 10\nheads = 4\n").1, "heads");
    assert_eq!(parse_err("capacity_factor = 0.5\n").1, "capacity_factor");
    assert_eq!(parse_err("N = 8\nworkers = 3\n").1, "workers");
    assert_eq!(parse_err("strategy = top2\nk = 3\n").1, "k");
    assert_eq!(parse_err("[bogus]\n").1, "bogus");
    assert_eq!(parse_err("just words\n").0, 1);
}

#[test]
fn effective_config_round_trips() {
    let text = "\
kind = balance-study
seed = 99
steps = 123
out = somewhere/else
N = 8
strategy = 4top1
capacity_mode = limited
capacity_factor = 1.5
aux_alpha = 0.003
moe_attention = true
lr = 0.0007
warmup = 12
workers = 4
strategies = top1, 2top1
fd_eps = 1e-6
";
    let c = parse_config(text).unwrap();
    let echoed = effective_config(&c);
    assert_eq!(parse_config(&echoed).unwrap(), c);
    assert_eq!(effective_config(&parse_config(&echoed).unwrap()), echoed);
}

#[test]
fn overrides_take_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ini");
    std::fs::write(&path, "seed = 1\nsteps = 10\nout = a\n").unwrap();
    let c = load_config(&path, Some(5), Some(3), Some("b".into())).unwrap();
    assert_eq!((c.train.seed, c.train.steps), (5, 3));
    assert_eq!(c.out, Some("b".into()));
    assert!(load_config(&path, None, Some(0), None).is_err());
}

#[test]
fn compare_run_writes_table_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let c = parse_config("kind = compare\nN = 8\ncapacity_mode = limited\nbatch = 4\n").unwrap();
    let report = run(&c, dir.path()).unwrap();
    assert_eq!(report.status, RunStatus::Passed);
    let table = std::fs::read_to_string(dir.path().join("compare.txt")).unwrap();
    assert_eq!(table.lines().count(), 6);
    let records = std::fs::read_to_string(dir.path().join("compare.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 5);
    let echo = std::fs::read_to_string(dir.path().join("effective.ini")).unwrap();
    assert_eq!(parse_config(&echo).unwrap(), c);
}

#[test]
fn gradcheck_run_passes() {
    let dir = tempfile::tempdir().unwrap();
    let c = parse_config("kind = gradcheck\nM = 8\nI = 16\nN = 4\nstrategy = ktop1\nZ = 2\nF = 2\nseq_len = 4\nvocab = 8\n").unwrap();
    let report = run(&c, dir.path()).unwrap();
    assert_eq!(report.status, RunStatus::Passed);
    assert!(report.summary["result"]["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn train_run_streams_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let c = parse_config("steps = 5\nN = 4\nstrategy = 2top1\n").unwrap();
    let report = run(&c, dir.path()).unwrap();
    assert_eq!(report.status, RunStatus::Passed);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(dir.path().join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[4]["step"], 4);
    assert_eq!(lines[0]["cv"].as_array().unwrap().len(), 2);
}

#[test]
fn balance_study_writes_paired_curves() {
    let dir = tempfile::tempdir().unwrap();
    let c = parse_config("kind = balance-study\nsteps = 6\nN = 4\n").unwrap();
    let report = run(&c, dir.path()).unwrap();
    assert_ne!(report.status, RunStatus::Diverged);
    let curves = std::fs::read_to_string(dir.path().join("balance_curves.jsonl")).unwrap();
    assert_eq!(curves.lines().count(), 6);
    assert!(curves.lines().next().unwrap().contains("cv_no_aux"));
}

#[test]
fn exit_codes() {
    assert_eq!(RunStatus::Passed.exit_code(), 0);
    assert_eq!(RunStatus::CheckFailed.exit_code(), 1);
    assert_eq!(RunStatus::Diverged.exit_code(), 2);
    assert_eq!(main_with_args(["protomoe", "run", "/definitely/missing.ini"]), EXIT_SETUP_ERROR);
}
