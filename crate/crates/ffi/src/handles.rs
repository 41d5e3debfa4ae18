use std::ffi::{c_char, CString};
use std::path::Path;

use protomoe::cli::{effective_config, parse_config, run, ExperimentConfig};
use protomoe::cluster_sim::{compare_strategies, format_table, StrategyCost};
use protomoe::numerics::Tensor;
use protomoe::routing::{build_dispatch_plan, select_prototyped_from_probs, select_topk, DispatchPlan, Selections};

use crate::{guard, out_arg, owned_string, slice_arg, str_arg, Failure, FfiResult, PmoeCapacityMode, PmoeStatus};

/// Parsed and validated experiment config.
pub struct PmoeConfig(ExperimentConfig);

/// Capacity-constrained dispatch plan.
pub struct PmoePlan(DispatchPlan);

/// Per-strategy cost rows of a single-block comparison.
pub struct PmoeComparison {
    rows: Vec<StrategyCost>,
    names: Vec<CString>,
}

/// One token's selection and where it landed.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PmoeAssignment {
    pub token: usize,
    /// Position among the token's selections.
    pub rank: usize,
    pub expert: usize,
    /// Buffer slot in the expert, or -1 when dropped for lack of capacity.
    pub slot: i64,
    pub weight: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PmoeStrategyCost {
    pub capacity: usize,
    pub expert_flops: u64,
    pub moe_layer_flops: u64,
    pub total_flops: u64,
    pub comm_entries: u64,
    pub dropped_fraction: f64,
}

fn publish<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    let slot = unsafe { out_arg(out, "out handle")? };
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref()
        .ok_or_else(|| Failure::new(PmoeStatus::NullPointer, format!("{what} is null")))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

// ---- config ---------------------------------------------------------------

/// Parses config text. On `PMOE_STATUS_PARSE` the last error names the
/// line and key.
#[no_mangle]
pub unsafe extern "C" fn pmoe_config_parse(text: *const c_char, out_config: *mut *mut PmoeConfig) -> PmoeStatus {
    guard(|| {
        let cfg = parse_config(str_arg(text, "text")?)?;
        publish(out_config, PmoeConfig(cfg))
    })
}

#[no_mangle]
pub unsafe extern "C" fn pmoe_config_free(config: *mut PmoeConfig) {
    free(config);
}

/// Fully resolved config text, including defaults. Free with `pmoe_string_free`.
#[no_mangle]
pub unsafe extern "C" fn pmoe_config_effective(config: *const PmoeConfig, out_text: *mut *mut c_char) -> PmoeStatus {
    guard(|| {
        let cfg = handle(config, "config")?;
        *out_arg(out_text, "out_text")? = owned_string(effective_config(&cfg.0));
        Ok(())
    })
}

/// Runs the experiment, writing its artifacts under `out_dir`.
/// `out_exit_code` receives the CLI exit code: 0 passed, 1 check failed,
/// 2 diverged.
#[no_mangle]
pub unsafe extern "C" fn pmoe_config_run(
    config: *const PmoeConfig,
    out_dir: *const c_char,
    out_exit_code: *mut i32,
) -> PmoeStatus {
    guard(|| {
        let cfg = handle(config, "config")?;
        let dir = str_arg(out_dir, "out_dir")?;
        let code = out_arg(out_exit_code, "out_exit_code")?;
        let report = run(&cfg.0, Path::new(dir))?;
        *code = report.status.exit_code();
        Ok(())
    })
}

// ---- dispatch plans -------------------------------------------------------

fn probability_matrix(data: &[f64], rows: usize, cols: usize) -> FfiResult<Tensor> {
    if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Failure::new(
            PmoeStatus::Input,
            format!("probability {i} is {} (must be finite and non-negative)", data[i]),
        ));
    }
    Ok(Tensor::new(vec![rows, cols], data.to_vec())?)
}

fn plan_from(selections: &Selections, capacity: usize, out: *mut *mut PmoePlan) -> FfiResult<()> {
    if capacity == 0 {
        return Err(Failure::new(PmoeStatus::Config, "capacity must be positive"));
    }
    publish(out, PmoePlan(build_dispatch_plan(selections, capacity)))
}

/// Top-k routing of a row-major `tokens x num_experts` probability matrix.
/// With `renormalize` the k selected probabilities are re-softmaxed into
/// gate weights, otherwise the raw probabilities are used.
#[no_mangle]
pub unsafe extern "C" fn pmoe_plan_from_topk(
    probs: *const f64,
    tokens: usize,
    num_experts: usize,
    k: usize,
    renormalize: bool,
    capacity: usize,
    out_plan: *mut *mut PmoePlan,
) -> PmoeStatus {
    guard(|| {
        let data = slice_arg(probs, tokens * num_experts, "probs")?;
        let m = probability_matrix(data, tokens, num_experts)?;
        plan_from(&select_topk(&m, k, renormalize)?, capacity, out_plan)
    })
}

/// Prototyped routing: `probs` holds `prototypes` consecutive row-major
/// `tokens x experts_per_prototype` matrices. Each prototype picks its top
/// expert; global expert index is `z * experts_per_prototype + j`.
#[no_mangle]
pub unsafe extern "C" fn pmoe_plan_from_prototypes(
    probs: *const f64,
    tokens: usize,
    prototypes: usize,
    experts_per_prototype: usize,
    capacity: usize,
    out_plan: *mut *mut PmoePlan,
) -> PmoeStatus {
    guard(|| {
        let block = tokens * experts_per_prototype;
        let data = slice_arg(probs, prototypes * block, "probs")?;
        let mats = (0..prototypes)
            .map(|z| probability_matrix(&data[z * block..(z + 1) * block], tokens, experts_per_prototype))
            .collect::<FfiResult<Vec<_>>>()?;
        plan_from(&select_prototyped_from_probs(&mats)?, capacity, out_plan)
    })
}

/// Parses a plan dump produced by `pmoe_plan_dump`.
#[no_mangle]
pub unsafe extern "C" fn pmoe_plan_from_dump(text: *const c_char, out_plan: *mut *mut PmoePlan) -> PmoeStatus {
    guard(|| publish(out_plan, PmoePlan(DispatchPlan::from_dump(str_arg(text, "text")?)?)))
}

#[no_mangle]
pub unsafe extern "C" fn pmoe_plan_free(plan: *mut PmoePlan) {
    free(plan);
}

/// Line-oriented text form of the plan. Free with `pmoe_string_free`.
#[no_mangle]
pub unsafe extern "C" fn pmoe_plan_dump(plan: *const PmoePlan, out_text: *mut *mut c_char) -> PmoeStatus {
    guard(|| {
        let p = handle(plan, "plan")?;
        *out_arg(out_text, "out_text")? = owned_string(p.0.to_dump());
        Ok(())
    })
}

/// Token count, expert count, capacity and number of assignments.
#[no_mangle]
pub unsafe extern "C" fn pmoe_plan_shape(
    plan: *const PmoePlan,
    out_tokens: *mut usize,
    out_experts: *mut usize,
    out_capacity: *mut usize,
    out_assignments: *mut usize,
) -> PmoeStatus {
    guard(|| {
        let p = &handle(plan, "plan")?.0;
        *out_arg(out_tokens, "out_tokens")? = p.num_tokens();
        *out_arg(out_experts, "out_experts")? = p.num_experts();
        *out_arg(out_capacity, "out_capacity")? = p.capacity();
        *out_arg(out_assignments, "out_assignments")? = p.assignments().len();
        Ok(())
    })
}

/// Assignment `index` in token-major, rank-minor order.
#[no_mangle]
pub unsafe extern "C" fn pmoe_plan_assignment(
    plan: *const PmoePlan,
    index: usize,
    out_assignment: *mut PmoeAssignment,
) -> PmoeStatus {
    guard(|| {
        let p = &handle(plan, "plan")?.0;
        let out = out_arg(out_assignment, "out_assignment")?;
        let a = p.assignments().get(index).ok_or_else(|| {
            Failure::new(
                PmoeStatus::OutOfRange,
                format!("assignment {index} out of range ({} total)", p.assignments().len()),
            )
        })?;
        *out = PmoeAssignment {
            token: a.token,
            rank: a.rank,
            expert: a.expert,
            slot: a.slot.map_or(-1, |s| s as i64),
            weight: a.weight,
        };
        Ok(())
    })
}

/// Real tokens per expert, written to `out_counts[0..num_experts]`.
#[no_mangle]
pub unsafe extern "C" fn pmoe_plan_expert_counts(plan: *const PmoePlan, out_counts: *mut usize, len: usize) -> PmoeStatus {
    guard(|| {
        let p = &handle(plan, "plan")?.0;
        let counts = p.expert_counts();
        if len < counts.len() {
            return Err(Failure::new(
                PmoeStatus::OutOfRange,
                format!("buffer holds {len} counts, plan has {} experts", counts.len()),
            ));
        }
        if out_counts.is_null() {
            return Err(Failure::new(PmoeStatus::NullPointer, "out_counts is null"));
        }
        std::slice::from_raw_parts_mut(out_counts, counts.len()).copy_from_slice(&counts);
        Ok(())
    })
}

/// Dropped selections, tokens that lost every selection, and the
/// coefficient of variation of expert load (NaN when undefined).
#[no_mangle]
pub unsafe extern "C" fn pmoe_plan_load(
    plan: *const PmoePlan,
    out_dropped: *mut usize,
    out_fully_dropped_tokens: *mut usize,
    out_cv: *mut f64,
) -> PmoeStatus {
    guard(|| {
        let p = &handle(plan, "plan")?.0;
        *out_arg(out_dropped, "out_dropped")? = p.dropped_count();
        *out_arg(out_fully_dropped_tokens, "out_fully_dropped_tokens")? = p.fully_dropped_tokens();
        *out_arg(out_cv, "out_cv")? = p.load_stats().cv.unwrap_or(f64::NAN);
        Ok(())
    })
}

// ---- strategy comparison --------------------------------------------------

/// Measures one forward pass of a single block for every strategy listed in
/// the config, at the config's sizes, capacity factor and worker count.
#[no_mangle]
pub unsafe extern "C" fn pmoe_compare(
    config: *const PmoeConfig,
    mode: PmoeCapacityMode,
    out_comparison: *mut *mut PmoeComparison,
) -> PmoeStatus {
    guard(|| {
        let cfg = &handle(config, "config")?.0;
        let rows = compare_strategies(&cfg.compare_config(), &cfg.strategies, mode.into())?;
        let names = rows
            .iter()
            .map(|r| CString::new(r.strategy.clone()).unwrap_or_default())
            .collect();
        publish(out_comparison, PmoeComparison { rows, names })
    })
}

#[no_mangle]
pub unsafe extern "C" fn pmoe_comparison_free(comparison: *mut PmoeComparison) {
    free(comparison);
}

#[no_mangle]
pub unsafe extern "C" fn pmoe_comparison_len(comparison: *const PmoeComparison, out_len: *mut usize) -> PmoeStatus {
    guard(|| {
        let c = handle(comparison, "comparison")?;
        *out_arg(out_len, "out_len")? = c.rows.len();
        Ok(())
    })
}

/// Row `index`. `out_name` receives a string owned by the comparison handle.
#[no_mangle]
pub unsafe extern "C" fn pmoe_comparison_row(
    comparison: *const PmoeComparison,
    index: usize,
    out_name: *mut *const c_char,
    out_cost: *mut PmoeStrategyCost,
) -> PmoeStatus {
    guard(|| {
        let c = handle(comparison, "comparison")?;
        let r = c.rows.get(index).ok_or_else(|| {
            Failure::new(PmoeStatus::OutOfRange, format!("row {index} out of range ({} rows)", c.rows.len()))
        })?;
        *out_arg(out_name, "out_name")? = c.names[index].as_ptr();
        *out_arg(out_cost, "out_cost")? = PmoeStrategyCost {
            capacity: r.capacity,
            expert_flops: r.expert_flops,
            moe_layer_flops: r.moe_layer_flops,
            total_flops: r.total_flops,
            comm_entries: r.comm_entries,
            dropped_fraction: r.dropped_fraction,
        };
        Ok(())
    })
}

/// Aligned text table of all rows. Free with `pmoe_string_free`.
#[no_mangle]
pub unsafe extern "C" fn pmoe_comparison_table(comparison: *const PmoeComparison, out_text: *mut *mut c_char) -> PmoeStatus {
    guard(|| {
        let c = handle(comparison, "comparison")?;
        *out_arg(out_text, "out_text")? = owned_string(format_table(&c.rows));
        Ok(())
    })
}
