use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::cluster_sim::{compare_strategies, format_table, ExpertCluster, StrategyCost};
use crate::error::Result;
use crate::moe_layer::{BlockDims, TransformerBlock};
use crate::numerics::{finite_diff_check, ParamStore, Tensor, Verdict};
use crate::routing::{CapacityMode, DEFAULT_AUX_ALPHA};
use crate::training::{train, StepMetrics, TrainConfig, TrainOutcome};

use super::config::{effective_config, ExperimentConfig, ExperimentKind};

/// How a run ended; maps onto the process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Passed,
    CheckFailed,
    Diverged,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Passed => 0,
            RunStatus::CheckFailed => 1,
            RunStatus::Diverged => 2,
        }
    }
}

/// Exit code for runs that never started or hit an I/O failure.
pub const EXIT_SETUP_ERROR: i32 = 3;

#[derive(Debug)]
pub struct RunReport {
    pub status: RunStatus,
    pub summary: Value,
    pub out_dir: PathBuf,
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn window_cv(metrics: &[StepMetrics], window: usize, tail: bool) -> Option<f64> {
    let w = window.min(metrics.len());
    let slice = if tail { &metrics[metrics.len() - w..] } else { &metrics[..w] };
    mean(slice.iter().filter_map(StepMetrics::mean_cv))
}

/// Executes one experiment, writing every artifact under `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("effective.ini"), effective_config(config))?;
    let (status, summary) = match config.kind {
        ExperimentKind::Train => run_train(&config.train, out_dir)?,
        ExperimentKind::Compare => run_compare(config, out_dir)?,
        ExperimentKind::Gradcheck => run_gradcheck(config, out_dir)?,
        ExperimentKind::BalanceStudy => run_balance(&config.train, out_dir)?,
    };
    let summary = json!({
        "kind": config.kind.key(),
        "status": format!("{status:?}"),
        "result": summary,
    });
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(RunReport {
        status,
        summary,
        out_dir: out_dir.to_path_buf(),
    })
}

fn train_streaming(config: &TrainConfig, path: &Path) -> Result<TrainOutcome> {
    let task = config.task()?;
    let mut w = BufWriter::new(File::create(path)?);
    let outcome = train(config, &task, |m| {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    w.flush()?;
    Ok(outcome)
}

fn run_train(config: &TrainConfig, out: &Path) -> Result<(RunStatus, Value)> {
    let outcome = train_streaming(config, &out.join("metrics.jsonl"))?;
    let window = (outcome.metrics.len() / 10).max(1);
    let status = if outcome.diverged() { RunStatus::Diverged } else { RunStatus::Passed };
    Ok((
        status,
        json!({
            "steps_run": outcome.metrics.len(),
            "initial_loss": outcome.metrics.first().map(|m| m.loss),
            "final_loss": (!outcome.metrics.is_empty()).then(|| outcome.final_loss(window)),
            "final_mean_cv": window_cv(&outcome.metrics, window, true),
            "divergence": outcome.divergence,
            "flops": outcome.report.flops,
            "comm_entries": outcome.report.comm_entries,
        }),
    ))
}

fn run_compare(config: &ExperimentConfig, out: &Path) -> Result<(RunStatus, Value)> {
    let t = &config.train;
    let cmp = config.compare_config();
    let rows = compare_strategies(&cmp, &config.strategies, t.capacity_mode)?;
    write_jsonl(&out.join("compare.jsonl"), &rows)?;
    let table = format_table(&rows);
    fs::write(out.join("compare.txt"), &table)?;
    print!("{table}");

    let ok = match t.capacity_mode {
        CapacityMode::Limited => rows.windows(2).all(|w| w[0].expert_flops == w[1].expert_flops),
        // Expert work is linear in capacity.
        CapacityMode::Standard => rows
            .windows(2)
            .all(|w| w[0].expert_flops * w[1].capacity as u64 == w[1].expert_flops * w[0].capacity as u64),
    };
    let spread = total_flops_spread(&rows);
    let status = if ok { RunStatus::Passed } else { RunStatus::CheckFailed };
    Ok((
        status,
        json!({ "capacity_mode": t.capacity_mode.key(), "rows": rows, "total_flops_spread": spread }),
    ))
}

/// `(max - min) / min` of the total forward FLOPs.
pub fn total_flops_spread(rows: &[StrategyCost]) -> f64 {
    let lo = rows.iter().map(|r| r.total_flops).min().unwrap_or(0);
    let hi = rows.iter().map(|r| r.total_flops).max().unwrap_or(0);
    if lo == 0 {
        0.0
    } else {
        (hi - lo) as f64 / lo as f64
    }
}

fn run_gradcheck(config: &ExperimentConfig, out: &Path) -> Result<(RunStatus, Value)> {
    let t = config.train;
    let model = t.model_config();
    let dims = BlockDims {
        model_dim: t.model_dim,
        hidden_dim: t.hidden_dim,
        heads: t.heads,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut store, "block", dims, model.moe, &mut rng)?;
    let x = Tensor::randn(&[t.seq_len, t.model_dim], 1.0, &mut rng);
    let coeffs: Vec<f64> = (0..t.seq_len * t.model_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = t.strategy.num_experts();
    let report = finite_diff_check(
        &mut store,
        |g, s| {
            let xv = g.input(x.clone())?;
            let out = block.forward(g, s, &mut ExpertCluster::single(n), xv, t.seq_len)?;
            let y = g.dot_const(out.output, coeffs.clone())?;
            let aux = out.aux_loss(g)?;
            g.add(y, aux)
        },
        config.gradcheck,
    )?;
    let records: Vec<Value> = report
        .entries
        .iter()
        .map(|e| {
            json!({
                "param": e.param, "index": e.index, "analytic": e.analytic,
                "numeric": e.numeric, "rel_error": e.rel_error, "verdict": format!("{:?}", e.verdict),
            })
        })
        .collect();
    write_jsonl(&out.join("gradcheck.jsonl"), &records)?;
    let status = if report.passed() { RunStatus::Passed } else { RunStatus::CheckFailed };
    println!(
        "gradcheck {}: {} entries, {} inconclusive, max rel. err {:.3e} (tolerance {:.0e})",
        if report.passed() { "PASS" } else { "FAIL" },
        report.checked(),
        report.count(Verdict::Inconclusive),
        report.max_rel_error,
        report.tolerance
    );
    Ok((
        status,
        json!({
            "strategy": t.strategy.key(),
            "checked": report.checked(),
            "passed": report.count(Verdict::Pass),
            "failed": report.count(Verdict::Fail),
            "inconclusive": report.count(Verdict::Inconclusive),
            "max_rel_error": report.max_rel_error,
            "tolerance": report.tolerance,
        }),
    ))
}

fn run_balance(config: &TrainConfig, out: &Path) -> Result<(RunStatus, Value)> {
    let alpha = if config.aux_alpha > 0.0 { config.aux_alpha } else { DEFAULT_AUX_ALPHA };
    let with = TrainConfig { aux_alpha: alpha, ..*config };
    let without = TrainConfig { aux_alpha: 0.0, ..*config };
    let on = train_streaming(&with, &out.join("metrics_aux.jsonl"))?;
    let off = train_streaming(&without, &out.join("metrics_no_aux.jsonl"))?;

    let curves: Vec<Value> = on
        .metrics
        .iter()
        .zip(&off.metrics)
        .map(|(a, b)| json!({ "step": a.step, "cv_aux": a.cv, "cv_no_aux": b.cv, "mean_cv_aux": a.mean_cv(), "mean_cv_no_aux": b.mean_cv() }))
        .collect();
    write_jsonl(&out.join("balance_curves.jsonl"), &curves)?;

    let window = (config.steps / 10).max(1);
    let (on_first, on_last) = (window_cv(&on.metrics, window, false), window_cv(&on.metrics, window, true));
    let off_last = window_cv(&off.metrics, window, true);
    let balanced = matches!((on_first, on_last, off_last), (Some(f), Some(l), Some(o)) if l < o && l < f);
    let status = if on.diverged() || off.diverged() {
        RunStatus::Diverged
    } else if balanced {
        RunStatus::Passed
    } else {
        RunStatus::CheckFailed
    };
    println!(
        "balance-study: mean c_v over the last {window} steps {:.4} with aux loss vs {:.4} without (first {window}: {:.4})",
        on_last.unwrap_or(f64::NAN),
        off_last.unwrap_or(f64::NAN),
        on_first.unwrap_or(f64::NAN)
    );
    Ok((
        status,
        json!({
            "aux_alpha": alpha,
            "window": window,
            "aux_first_mean_cv": on_first,
            "aux_last_mean_cv": on_last,
            "no_aux_last_mean_cv": off_last,
            "aux_lowers_cv": balanced,
        }),
    ))
}
