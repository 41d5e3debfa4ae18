//! Expert parallelism over virtual workers with exact communication and
//! FLOP accounting.
//!
//! Workers run sequentially in ascending index order, so every result is
//! bit-identical to a single-worker execution of the same math.

mod compare;
mod ops;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};
use crate::routing::DispatchPlan;

pub use compare::{compare_strategies, format_table, CompareConfig, StrategyCost};
pub use ops::{routing_op_count, RoutingOpCount};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub workers: usize,
    /// Always 1 here.
    pub devices_per_worker: usize,
    pub experts_per_worker: usize,
}

impl ClusterConfig {
    pub fn new(workers: usize, num_experts: usize) -> Result<Self> {
        if workers == 0 || !num_experts.is_multiple_of(workers) {
            return Err(Error::Config(format!(
                "{num_experts} experts cannot be split evenly over {workers} workers"
            )));
        }
        Ok(Self {
            workers,
            devices_per_worker: 1,
            experts_per_worker: num_experts / workers,
        })
    }
}

/// Expert → worker mapping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placement {
    workers: usize,
    expert_worker: Vec<usize>,
}

impl Placement {
    pub fn worker_of(&self, expert: usize) -> usize {
        self.expert_worker[expert]
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn num_experts(&self) -> usize {
        self.expert_worker.len()
    }

    pub fn experts_on(&self, worker: usize) -> impl Iterator<Item = usize> + '_ {
        self.expert_worker
            .iter()
            .enumerate()
            .filter(move |(_, &w)| w == worker)
            .map(|(e, _)| e)
    }
}

/// Contiguous blocks: expert `i` lives on worker `⌊i/e⌋`.
pub fn place_experts(config: &ClusterConfig, num_experts: usize) -> Result<Placement> {
    if config.experts_per_worker * config.workers != num_experts || config.experts_per_worker == 0 {
        return Err(Error::Config(format!(
            "e*D must equal N: {}*{} != {num_experts}",
            config.experts_per_worker, config.workers
        )));
    }
    Ok(Placement {
        workers: config.workers,
        expert_worker: (0..num_experts).map(|i| i / config.experts_per_worker).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Token rows travel to the workers hosting their experts.
    Dispatch,
    /// Expert outputs travel back to the tokens' home workers.
    Combine,
}

/// Cost of one MoE layer invocation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub capacity: usize,
    /// Expert feed-forward work including padding rows.
    pub expert_flops: u64,
    /// Everything the layer charged, routing and combine included.
    pub layer_flops: u64,
    pub comm_entries: u64,
    pub dropped: usize,
    pub selections: usize,
}

/// Cumulative accounting; all counters only grow.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops: u64,
    pub comm_entries: u64,
    /// Per-layer totals, in first-seen order.
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn add_flops(&mut self, n: u64) {
        self.flops += n;
    }

    pub fn record_layer(&mut self, cost: &LayerCost) {
        match self.layers.iter_mut().find(|l| l.name == cost.name) {
            Some(l) => {
                l.capacity = cost.capacity;
                l.expert_flops += cost.expert_flops;
                l.layer_flops += cost.layer_flops;
                l.comm_entries += cost.comm_entries;
                l.dropped += cost.dropped;
                l.selections += cost.selections;
            }
            None => self.layers.push(cost.clone()),
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// Virtual cluster that hosts experts and meters all-to-all traffic.
#[derive(Clone, Debug)]
pub struct ExpertCluster {
    placement: Placement,
    report: CostReport,
    sent: Vec<u64>,
    received: Vec<u64>,
}

impl ExpertCluster {
    pub fn new(config: &ClusterConfig, num_experts: usize) -> Result<Self> {
        let placement = place_experts(config, num_experts)?;
        Ok(Self {
            sent: vec![0; config.workers],
            received: vec![0; config.workers],
            placement,
            report: CostReport::default(),
        })
    }

    /// One worker hosting every expert.
    pub fn single(num_experts: usize) -> Self {
        Self::new(&ClusterConfig::new(1, num_experts).expect("one worker fits any N"), num_experts)
            .expect("one worker fits any N")
    }

    pub fn placement(&self) -> &Placement {
        &self.placement
    }

    pub fn report(&self) -> &CostReport {
        &self.report
    }

    pub fn report_mut(&mut self) -> &mut CostReport {
        &mut self.report
    }

    /// Entries sent and received by each worker so far.
    pub fn traffic(&self) -> (&[u64], &[u64]) {
        (&self.sent, &self.received)
    }

    /// Worker holding token `t` of `tokens`, with tokens sharded contiguously.
    pub fn home_worker(&self, token: usize, tokens: usize) -> usize {
        token * self.placement.workers / tokens.max(1)
    }

    /// Logically exchanges the `[C×M]` expert buffers; values are untouched.
    ///
    /// Every entry is counted once, even when source and destination are the
    /// same worker, so the layer total is `E·C·M` per direction. Padding rows
    /// are attributed to the expert's own worker.
    pub fn all_to_all(&mut self, g: &Graph, buffers: Vec<Var>, plan: &DispatchPlan, direction: Direction) -> Result<Vec<Var>> {
        if buffers.len() != self.placement.num_experts() {
            return Err(Error::Config(format!(
                "{} buffers for {} placed experts",
                buffers.len(),
                self.placement.num_experts()
            )));
        }
        let mut entries = 0u64;
        for (e, &b) in buffers.iter().enumerate() {
            let shape = g.shape(b);
            let (c, m) = (shape[0], shape[1]);
            entries += (c * m) as u64;
            let expert_worker = self.placement.worker_of(e);
            for row in plan.buffer_rows(e).iter().take(c) {
                let remote = row.map_or(expert_worker, |t| self.home_worker(t, plan.num_tokens()));
                let (src, dst) = match direction {
                    Direction::Dispatch => (remote, expert_worker),
                    Direction::Combine => (expert_worker, remote),
                };
                self.sent[src] += m as u64;
                self.received[dst] += m as u64;
            }
        }
        self.report.comm_entries += entries;
        Ok(buffers)
    }
}

#[cfg(test)]
mod tests;
