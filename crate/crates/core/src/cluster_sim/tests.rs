use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::Tensor;
use crate::routing::{build_dispatch_plan, CapacityMode, Choice, RoutingStrategy, Selections};

fn uniform_plan(tokens: usize, experts: usize, capacity: usize) -> DispatchPlan {
    let per_token = (0..tokens)
        .map(|t| vec![Choice { expert: t % experts, weight: 1.0 }])
        .collect();
    build_dispatch_plan(&Selections { num_experts: experts, per_token }, capacity)
}

fn buffers(g: &mut Graph, experts: usize, c: usize, m: usize) -> Vec<Var> {
    (0..experts).map(|_| g.input(Tensor::zeros(&[c, m])).unwrap()).collect()
}

#[test]
fn placement_two_workers() {
    let p = place_experts(&ClusterConfig::new(2, 4).unwrap(), 4).unwrap();
    assert_eq!((0..4).map(|e| p.worker_of(e)).collect::<Vec<_>>(), vec![0, 0, 1, 1]);
    assert_eq!(p.experts_on(1).collect::<Vec<_>>(), vec![2, 3]);
}

#[test]
fn placement_one_expert_each() {
    let p = place_experts(&ClusterConfig::new(4, 4).unwrap(), 4).unwrap();
    assert_eq!((0..4).map(|e| p.worker_of(e)).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
}

#[test]
fn placement_block_lookup() {
    let p = place_experts(&ClusterConfig::new(8, 32).unwrap(), 32).unwrap();
    assert_eq!(p.worker_of(17), 4);
}

#[test]
fn placement_rejects_uneven_split() {
    assert!(matches!(ClusterConfig::new(3, 4), Err(Error::Config(_))));
    let cfg = ClusterConfig {
        workers: 2,
        devices_per_worker: 1,
        experts_per_worker: 3,
    };
    assert!(matches!(place_experts(&cfg, 4), Err(Error::Config(_))));
}

#[test]
fn all_to_all_counts_every_entry() {
    let mut cluster = ExpertCluster::new(&ClusterConfig::new(2, 4).unwrap(), 4).unwrap();
    let plan = uniform_plan(24, 4, 10);
    let mut g = Graph::new();
    let b = buffers(&mut g, 4, 10, 8);
    let before: Vec<f64> = b.iter().flat_map(|&v| g.value(v).data().to_vec()).collect();
    let out = cluster.all_to_all(&g, b, &plan, Direction::Dispatch).unwrap();
    assert_eq!(cluster.report().comm_entries, 320);
    let after: Vec<f64> = out.iter().flat_map(|&v| g.value(v).data().to_vec()).collect();
    assert_eq!(before, after);
    cluster.all_to_all(&g, out, &plan, Direction::Combine).unwrap();
    assert_eq!(cluster.report().comm_entries, 640);
}

#[test]
fn local_traffic_still_counted() {
    let mut cluster = ExpertCluster::single(1);
    let plan = uniform_plan(5, 1, 10);
    let mut g = Graph::new();
    let b = buffers(&mut g, 1, 10, 8);
    cluster.all_to_all(&g, b, &plan, Direction::Dispatch).unwrap();
    assert_eq!(cluster.report().comm_entries, 80);
    assert_eq!(cluster.traffic(), (&[80u64][..], &[80u64][..]));
}

#[test]
fn per_worker_traffic_balances() {
    let mut cluster = ExpertCluster::new(&ClusterConfig::new(4, 8).unwrap(), 8).unwrap();
    let plan = uniform_plan(32, 8, 5);
    let mut g = Graph::new();
    let b = buffers(&mut g, 8, 5, 3);
    cluster.all_to_all(&g, b, &plan, Direction::Dispatch).unwrap();
    let (sent, received) = cluster.traffic();
    assert_eq!(sent.iter().sum::<u64>(), 8 * 5 * 3);
    assert_eq!(received.iter().sum::<u64>(), 8 * 5 * 3);
    assert!(received.iter().all(|&r| r == 2 * 5 * 3));
}

#[test]
fn buffer_count_mismatch_is_config_error() {
    let mut cluster = ExpertCluster::single(4);
    let plan = uniform_plan(4, 4, 1);
    let mut g = Graph::new();
    let b = buffers(&mut g, 3, 1, 2);
    assert!(matches!(cluster.all_to_all(&g, b, &plan, Direction::Dispatch), Err(Error::Config(_))));
}

#[test]
fn op_count_examples() {
    let top4 = RoutingStrategy::top_k(4, 32).unwrap();
    assert_eq!(routing_op_count(&top4, 1).critical_path, 128);
    let proto = RoutingStrategy::k_top1_of(4, 8, 32).unwrap();
    assert_eq!(routing_op_count(&proto, 1).critical_path, 8);
    let top1 = RoutingStrategy::top_k(1, 32).unwrap();
    let one = RoutingStrategy::k_top1(1, 32).unwrap();
    assert_eq!(routing_op_count(&top1, 17), routing_op_count(&one, 17));
}

#[test]
fn prototyping_shortens_critical_path() {
    for n in [8usize, 16, 32, 64, 128] {
        for k in [2usize, 4, 8] {
            if n % k != 0 {
                continue;
            }
            let tk = routing_op_count(&RoutingStrategy::top_k(k, n).unwrap(), 64);
            let kt = routing_op_count(&RoutingStrategy::k_top1_of(k, n / k, n).unwrap(), 64);
            assert!(kt.critical_path < tk.critical_path);
        }
    }
}

fn small_compare() -> CompareConfig {
    CompareConfig {
        model_dim: 16,
        hidden_dim: 32,
        num_experts: 4,
        tokens: 32,
        seq_len: 8,
        heads: 2,
        capacity_factor: 1.25,
        workers: 1,
        seed: 3,
    }
}

#[test]
fn expert_flops_linear_in_capacity() {
    let cfg = small_compare();
    let rows = compare_strategies(
        &cfg,
        &[RoutingStrategy::top_k(1, 4).unwrap(), RoutingStrategy::top_k(2, 4).unwrap()],
        CapacityMode::Standard,
    )
    .unwrap();
    assert_eq!(rows[1].capacity, 2 * rows[0].capacity);
    assert_eq!(rows[1].expert_flops, 2 * rows[0].expert_flops);
    let (m, i, c) = (16u64, 32u64, rows[0].capacity as u64);
    // Two matmuls, two bias adds and the relu over every padded slot.
    assert_eq!(rows[0].expert_flops, 4 * (4 * c * m * i + 2 * c * i + c * m));
}

#[test]
fn comm_is_twice_ecm_per_layer() {
    let cfg = small_compare();
    let rows = compare_strategies(&cfg, &[RoutingStrategy::top_k(2, 4).unwrap()], CapacityMode::Standard).unwrap();
    assert_eq!(rows[0].comm_entries, 2 * 4 * rows[0].capacity as u64 * 16);
}

#[test]
fn worker_count_does_not_change_results() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..3 {
        let mut cfg = small_compare();
        cfg.seed = rng.gen();
        let strategies = [RoutingStrategy::top_k(2, 4).unwrap(), RoutingStrategy::k_top1(2, 2).unwrap()];
        let one = compare_strategies(&cfg, &strategies, CapacityMode::Standard).unwrap();
        cfg.workers = 4;
        let four = compare_strategies(&cfg, &strategies, CapacityMode::Standard).unwrap();
        assert_eq!(one, four);
    }
}

#[test]
fn table_lists_every_strategy() {
    let rows = compare_strategies(
        &small_compare(),
        &[RoutingStrategy::top_k(1, 4).unwrap(), RoutingStrategy::k_top1(2, 2).unwrap()],
        CapacityMode::Limited,
    )
    .unwrap();
    let table = format_table(&rows);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("strategy"));
    assert!(lines[1].starts_with("top-1") && lines[2].starts_with("2 top-1"));
}

#[test]
fn compare_rejects_mismatched_experts() {
    let err = compare_strategies(&small_compare(), &[RoutingStrategy::top_k(1, 8).unwrap()], CapacityMode::Standard);
    assert!(matches!(err, Err(Error::Config(_))));
}
