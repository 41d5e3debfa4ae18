use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe_layer::{BlockDims, MoeLayerConfig, TransformerBlock};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::routing::{CapacityMode, RoutingStrategy};

use super::{ClusterConfig, ExpertCluster};

/// Shared shape of the block every strategy is measured on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub num_experts: usize,
    /// Tokens per forward, `batch · seq_len`.
    pub tokens: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub capacity_factor: f64,
    pub workers: usize,
    pub seed: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            hidden_dim: 256,
            num_experts: 8,
            tokens: 256,
            seq_len: 32,
            heads: 4,
            capacity_factor: 1.25,
            workers: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyCost {
    pub strategy: String,
    pub capacity: usize,
    pub expert_flops: u64,
    /// Everything the feed-forward MoE layer charged.
    pub moe_layer_flops: u64,
    /// Whole block forward: attention, norms, residuals and the MoE layer.
    pub total_flops: u64,
    pub comm_entries: u64,
    pub dropped_fraction: f64,
}

/// Runs one instrumented block forward per strategy.
///
/// Parameters and input are drawn from the same seed for every strategy.
/// Experts are created before routers, so the expert weights coincide even
/// though router shapes differ.
pub fn compare_strategies(
    config: &CompareConfig,
    strategies: &[RoutingStrategy],
    mode: CapacityMode,
) -> Result<Vec<StrategyCost>> {
    if config.tokens == 0 || config.seq_len == 0 || !config.tokens.is_multiple_of(config.seq_len) {
        return Err(Error::Config(format!(
            "{} tokens are not a whole number of length-{} sequences",
            config.tokens, config.seq_len
        )));
    }
    let dims = BlockDims {
        model_dim: config.model_dim,
        hidden_dim: config.hidden_dim,
        heads: config.heads,
    };
    let mut rows = Vec::with_capacity(strategies.len());
    for strategy in strategies {
        if strategy.num_experts() != config.num_experts {
            return Err(Error::Config(format!(
                "strategy {strategy} has {} experts, comparison uses {}",
                strategy.num_experts(),
                config.num_experts
            )));
        }
        let mut moe = MoeLayerConfig::new(*strategy);
        moe.capacity_factor = config.capacity_factor;
        moe.capacity_mode = mode;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let input = Tensor::randn(&[config.tokens, config.model_dim], 1.0, &mut rng);
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "block", dims, moe, &mut rng)?;
        let mut cluster = ExpertCluster::new(&ClusterConfig::new(config.workers, config.num_experts)?, config.num_experts)?;

        let mut g = Graph::new();
        let x = g.input(input)?;
        let out = block.forward(&mut g, &store, &mut cluster, x, config.seq_len)?;
        cluster.report_mut().add_flops(g.flops());
        rows.push(StrategyCost {
            strategy: strategy.to_string(),
            capacity: out.ffn.cost.capacity,
            expert_flops: out.ffn.cost.expert_flops,
            moe_layer_flops: out.ffn.cost.layer_flops,
            total_flops: cluster.report().flops,
            comm_entries: cluster.report().comm_entries,
            dropped_fraction: out.ffn.plan.dropped_fraction(),
        });
    }
    Ok(rows)
}

/// Aligned plain-text rendering of a comparison.
pub fn format_table(rows: &[StrategyCost]) -> String {
    let header = ["strategy", "capacity", "expert_flops", "moe_layer_flops", "total_flops", "comm_entries", "dropped"];
    let cells: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.strategy.clone(),
                r.capacity.to_string(),
                r.expert_flops.to_string(),
                r.moe_layer_flops.to_string(),
                r.total_flops.to_string(),
                r.comm_entries.to_string(),
                format!("{:.4}", r.dropped_fraction),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cols: Vec<&str>| {
        let parts: Vec<String> = cols
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec());
    for row in &cells {
        line(row.iter().map(String::as_str).collect());
    }
    out
}
