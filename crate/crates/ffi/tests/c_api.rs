use std::ffi::{c_char, CStr, CString};
use std::ptr;

use protomoe_ffi::*;

fn last_error() -> String {
    let p = pmoe_last_error();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn take_string(p: *mut c_char) -> String {
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { pmoe_string_free(p) };
    s
}

fn config(text: &str) -> *mut PmoeConfig {
    let text = CString::new(text).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { pmoe_config_parse(text.as_ptr(), &mut cfg) }, PmoeStatus::Ok);
    cfg
}

#[test]
fn capacity_matches_formula() {
    let mut c = 0usize;
    let top2 = CString::new("top2").unwrap();
    let s = unsafe { pmoe_capacity(top2.as_ptr(), 8, 256, 1.25, PmoeCapacityMode::Standard, &mut c) };
    assert_eq!(s, PmoeStatus::Ok);
    assert_eq!(c, 80);
    let s = unsafe { pmoe_capacity(top2.as_ptr(), 8, 256, 1.25, PmoeCapacityMode::Limited, &mut c) };
    assert_eq!(s, PmoeStatus::Ok);
    assert_eq!(c, 40);
    let four = CString::new("4top1").unwrap();
    unsafe { pmoe_capacity(four.as_ptr(), 8, 256, 1.25, PmoeCapacityMode::Limited, &mut c) };
    assert_eq!(c, 40);
}

#[test]
fn capacity_errors() {
    let mut c = 0usize;
    let bad = CString::new("top9").unwrap();
    let s = unsafe { pmoe_capacity(bad.as_ptr(), 8, 256, 1.25, PmoeCapacityMode::Standard, &mut c) };
    assert_eq!(s, PmoeStatus::Config);
    assert!(last_error().contains("k"));
    let ok = CString::new("top1").unwrap();
    let s = unsafe { pmoe_capacity(ok.as_ptr(), 8, 256, 0.5, PmoeCapacityMode::Standard, &mut c) };
    assert_eq!(s, PmoeStatus::Config);
    assert!(last_error().contains("capacity factor"));
    let s = unsafe { pmoe_capacity(ptr::null(), 8, 256, 1.25, PmoeCapacityMode::Standard, &mut c) };
    assert_eq!(s, PmoeStatus::NullPointer);
    let s = unsafe { pmoe_capacity(ok.as_ptr(), 8, 256, 1.25, PmoeCapacityMode::Standard, ptr::null_mut()) };
    assert_eq!(s, PmoeStatus::NullPointer);
    // a later success clears the message
    let s = unsafe { pmoe_capacity(ok.as_ptr(), 8, 256, 1.25, PmoeCapacityMode::Standard, &mut c) };
    assert_eq!(s, PmoeStatus::Ok);
    assert!(pmoe_last_error().is_null());
}

#[test]
fn coefficient_of_variation() {
    let counts = [2.0, 4.0, 6.0];
    let mut cv = 0.0;
    assert_eq!(unsafe { pmoe_coefficient_of_variation(counts.as_ptr(), 3, &mut cv) }, PmoeStatus::Ok);
    let expected = (8.0f64 / 3.0).sqrt() / 4.0;
    assert!((cv - expected).abs() < 1e-15);
    let zeros = [0.0; 4];
    assert_eq!(
        unsafe { pmoe_coefficient_of_variation(zeros.as_ptr(), 4, &mut cv) },
        PmoeStatus::Undefined
    );
}

#[test]
fn routing_op_count() {
    let (mut total, mut crit) = (0u64, 0u64);
    let top4 = CString::new("top4").unwrap();
    let four = CString::new("4top1").unwrap();
    unsafe { pmoe_routing_op_count(top4.as_ptr(), 32, 10, &mut total, &mut crit) };
    assert_eq!((total, crit), (1280, 128));
    unsafe { pmoe_routing_op_count(four.as_ptr(), 32, 10, &mut total, &mut crit) };
    assert_eq!((total, crit), (320, 8));
}

#[test]
fn topk_plan_accessors_and_dump_round_trip() {
    // 4 tokens, 2 experts; every token prefers expert 0, capacity 2.
    let probs = [0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.6, 0.4];
    let mut plan = ptr::null_mut();
    let s = unsafe { pmoe_plan_from_topk(probs.as_ptr(), 4, 2, 1, true, 2, &mut plan) };
    assert_eq!(s, PmoeStatus::Ok);

    let (mut t, mut n, mut c, mut a) = (0, 0, 0, 0);
    unsafe { pmoe_plan_shape(plan, &mut t, &mut n, &mut c, &mut a) };
    assert_eq!((t, n, c, a), (4, 2, 2, 4));

    let mut asg = PmoeAssignment {
        token: 0,
        rank: 0,
        expert: 0,
        slot: 0,
        weight: 0.0,
    };
    unsafe { pmoe_plan_assignment(plan, 1, &mut asg) };
    assert_eq!((asg.token, asg.expert, asg.slot, asg.weight), (1, 0, 1, 1.0));
    unsafe { pmoe_plan_assignment(plan, 2, &mut asg) };
    assert_eq!((asg.token, asg.slot), (2, -1));
    assert_eq!(unsafe { pmoe_plan_assignment(plan, 4, &mut asg) }, PmoeStatus::OutOfRange);

    let mut counts = [9usize; 2];
    unsafe { pmoe_plan_expert_counts(plan, counts.as_mut_ptr(), 2) };
    assert_eq!(counts, [2, 0]);
    assert_eq!(
        unsafe { pmoe_plan_expert_counts(plan, counts.as_mut_ptr(), 1) },
        PmoeStatus::OutOfRange
    );

    let (mut dropped, mut full, mut cv) = (0, 0, 0.0);
    unsafe { pmoe_plan_load(plan, &mut dropped, &mut full, &mut cv) };
    assert_eq!((dropped, full), (2, 2));
    assert!((cv - 1.0).abs() < 1e-12);

    let mut text = ptr::null_mut();
    unsafe { pmoe_plan_dump(plan, &mut text) };
    let dump = CString::new(take_string(text)).unwrap();
    let mut again = ptr::null_mut();
    assert_eq!(unsafe { pmoe_plan_from_dump(dump.as_ptr(), &mut again) }, PmoeStatus::Ok);
    let mut text2 = ptr::null_mut();
    unsafe { pmoe_plan_dump(again, &mut text2) };
    assert_eq!(take_string(text2), dump.to_str().unwrap());

    unsafe {
        pmoe_plan_free(plan);
        pmoe_plan_free(again);
        pmoe_plan_free(ptr::null_mut());
    }
}

#[test]
fn prototyped_plan_uses_global_indices_and_raw_weights() {
    // 2 prototypes x 1 token x 2 experts each.
    let probs = [0.3, 0.7, 0.6, 0.4];
    let mut plan = ptr::null_mut();
    assert_eq!(
        unsafe { pmoe_plan_from_prototypes(probs.as_ptr(), 1, 2, 2, 1, &mut plan) },
        PmoeStatus::Ok
    );
    let mut a = PmoeAssignment {
        token: 0,
        rank: 0,
        expert: 0,
        slot: 0,
        weight: 0.0,
    };
    unsafe { pmoe_plan_assignment(plan, 0, &mut a) };
    assert_eq!((a.expert, a.weight), (1, 0.7));
    unsafe { pmoe_plan_assignment(plan, 1, &mut a) };
    assert_eq!((a.rank, a.expert, a.weight), (1, 2, 0.6));
    unsafe { pmoe_plan_free(plan) };
}

#[test]
fn plan_input_errors() {
    let mut plan = ptr::null_mut();
    let probs = [0.5, f64::NAN];
    assert_eq!(
        unsafe { pmoe_plan_from_topk(probs.as_ptr(), 1, 2, 1, true, 1, &mut plan) },
        PmoeStatus::Input
    );
    let probs = [0.5, 0.5];
    assert_eq!(
        unsafe { pmoe_plan_from_topk(probs.as_ptr(), 1, 2, 3, true, 1, &mut plan) },
        PmoeStatus::Config
    );
    assert_eq!(
        unsafe { pmoe_plan_from_topk(probs.as_ptr(), 1, 2, 1, true, 0, &mut plan) },
        PmoeStatus::Config
    );
    assert!(plan.is_null());
    let junk = CString::new("not a plan").unwrap();
    assert_eq!(unsafe { pmoe_plan_from_dump(junk.as_ptr(), &mut plan) }, PmoeStatus::Input);
}

#[test]
fn config_parse_error_names_line_and_key() {
    let text = CString::new("N = 4\nlearning_rate = 1\n").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { pmoe_config_parse(text.as_ptr(), &mut cfg) }, PmoeStatus::Parse);
    let msg = last_error();
    assert!(msg.contains("line 2") && msg.contains("learning_rate"), "{msg}");
    assert!(cfg.is_null());
}

#[test]
fn comparison_limited_capacity_equal_expert_flops() {
    let cfg = config("kind = compare\nN = 8\nbatch = 4\n");
    let mut effective = ptr::null_mut();
    unsafe { pmoe_config_effective(cfg, &mut effective) };
    assert!(take_string(effective).contains("capacity_factor = 1.25"));

    let mut cmp = ptr::null_mut();
    assert_eq!(unsafe { pmoe_compare(cfg, PmoeCapacityMode::Limited, &mut cmp) }, PmoeStatus::Ok);
    let mut len = 0;
    unsafe { pmoe_comparison_len(cmp, &mut len) };
    assert_eq!(len, 5);
    let mut flops = Vec::new();
    for i in 0..len {
        let mut name = ptr::null();
        let mut cost = PmoeStrategyCost {
            capacity: 0,
            expert_flops: 0,
            moe_layer_flops: 0,
            total_flops: 0,
            comm_entries: 0,
            dropped_fraction: 0.0,
        };
        assert_eq!(unsafe { pmoe_comparison_row(cmp, i, &mut name, &mut cost) }, PmoeStatus::Ok);
        assert!(!unsafe { CStr::from_ptr(name) }.to_bytes().is_empty());
        assert_eq!(cost.comm_entries, 2 * 8 * cost.capacity as u64 * 16);
        flops.push(cost.expert_flops);
    }
    assert!(flops.windows(2).all(|w| w[0] == w[1]));
    let mut table = ptr::null_mut();
    unsafe { pmoe_comparison_table(cmp, &mut table) };
    assert_eq!(take_string(table).lines().count(), 6);
    unsafe {
        pmoe_comparison_free(cmp);
        pmoe_config_free(cfg);
    }
}

#[test]
fn config_run_writes_artifacts() {
    let dir = std::env::temp_dir().join(format!("protomoe-ffi-run-{}", std::process::id()));
    let cfg = config("kind = train\nsteps = 3\nN = 4\n");
    let out = CString::new(dir.to_str().unwrap()).unwrap();
    let mut code = -1;
    assert_eq!(unsafe { pmoe_config_run(cfg, out.as_ptr(), &mut code) }, PmoeStatus::Ok);
    assert_eq!(code, 0);
    let metrics = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    unsafe { pmoe_config_free(cfg) };
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(pmoe_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
