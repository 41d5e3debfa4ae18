use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster_sim::{ClusterConfig, CostReport, ExpertCluster};
use crate::error::{Error, Result};
use crate::moe_layer::{BlockDims, ModelConfig, MoeLanguageModel, MoeLayerConfig};
use crate::numerics::{Graph, ParamStore};
use crate::routing::{CapacityMode, RoutingStrategy, DEFAULT_AUX_ALPHA};

use super::optim::{adam_step, AdamHyper, AdamState};
use super::task::SyntheticTask;

/// Ratio to the step-0 loss beyond which a step counts towards divergence.
pub const DIVERGENCE_RATIO: f64 = 10.0;
/// Consecutive over-threshold steps that halt a run.
pub const DIVERGENCE_PATIENCE: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub vocab: usize,
    pub clusters: usize,
    /// Successors per token in each chain.
    pub branching: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub layers: usize,
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub strategy: RoutingStrategy,
    pub capacity_mode: CapacityMode,
    pub capacity_factor: f64,
    pub aux_alpha: f64,
    pub renormalize_gates: bool,
    pub moe_attention: bool,
    pub workers: usize,
    pub optimizer: AdamHyper,
    pub steps: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Small model that trains in seconds per hundred steps.
    pub fn toy(strategy: RoutingStrategy) -> Self {
        Self {
            vocab: 32,
            clusters: 8,
            branching: 2,
            seq_len: 16,
            batch: 8,
            layers: 2,
            model_dim: 16,
            hidden_dim: 32,
            heads: 2,
            strategy,
            capacity_mode: CapacityMode::Standard,
            capacity_factor: 1.25,
            aux_alpha: DEFAULT_AUX_ALPHA,
            renormalize_gates: false,
            moe_attention: false,
            workers: 1,
            optimizer: AdamHyper {
                lr: 3e-3,
                ..AdamHyper::default()
            },
            steps: 500,
            seed: 0,
        }
    }

    /// Tokens per step, `B·L`.
    pub fn tokens(&self) -> usize {
        self.batch * self.seq_len
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut moe = MoeLayerConfig::new(self.strategy);
        moe.capacity_mode = self.capacity_mode;
        moe.capacity_factor = self.capacity_factor;
        moe.aux_alpha = self.aux_alpha;
        moe.renormalize_gates = self.renormalize_gates;
        moe.moe_attention = self.moe_attention;
        ModelConfig {
            vocab: self.vocab,
            seq_len: self.seq_len,
            layers: self.layers,
            dims: BlockDims {
                model_dim: self.model_dim,
                hidden_dim: self.hidden_dim,
                heads: self.heads,
            },
            moe,
        }
    }

    pub fn task(&self) -> Result<SyntheticTask> {
        SyntheticTask::new(self.vocab, self.clusters, self.seq_len, self.branching, self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::Config("batch and steps must be positive".into()));
        }
        if !(self.capacity_factor.is_finite() && self.capacity_factor >= 1.0) {
            return Err(Error::Config(format!("capacity factor {} must be >= 1", self.capacity_factor)));
        }
        if !(self.aux_alpha.is_finite() && self.aux_alpha >= 0.0 && self.optimizer.lr.is_finite() && self.optimizer.lr > 0.0) {
            return Err(Error::Config("aux_alpha must be >= 0 and lr > 0".into()));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads do not divide M={}", self.heads, self.model_dim)));
        }
        ClusterConfig::new(self.workers, self.strategy.num_experts())?;
        Ok(())
    }
}

/// One line of the metric stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Mean next-token cross-entropy in nats.
    pub loss: f64,
    /// Weighted balancing loss summed over routed layers.
    pub aux_loss: f64,
    pub layers: Vec<String>,
    /// Per routed layer; `None` when the layer kept no tokens at all.
    pub cv: Vec<Option<f64>>,
    pub dropped_fraction: Vec<f64>,
    pub flops: u64,
    pub comm_entries: u64,
}

impl StepMetrics {
    /// Mean of the defined per-layer c_v values.
    pub fn mean_cv(&self) -> Option<f64> {
        let defined: Vec<f64> = self.cv.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    /// Set when the run was halted for divergence.
    pub divergence: Option<String>,
    pub report: CostReport,
}

impl TrainOutcome {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    /// Mean loss over the last `window` recorded steps.
    pub fn final_loss(&self, window: usize) -> f64 {
        let tail = &self.metrics[self.metrics.len().saturating_sub(window.max(1))..];
        tail.iter().map(|m| m.loss).sum::<f64>() / tail.len() as f64
    }
}

fn divergence_error(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::Evaluation(_))
}

/// Trains a fresh model on `task`, handing every step's metrics to `sink`.
///
/// Model initialization draws from `config.seed` and batches from the task's
/// seed, so two identical calls produce identical metric streams.
pub fn train<F>(config: &TrainConfig, task: &SyntheticTask, mut sink: F) -> Result<TrainOutcome>
where
    F: FnMut(&StepMetrics) -> Result<()>,
{
    config.validate()?;
    if task.vocab() != config.vocab || task.seq_len() != config.seq_len {
        return Err(Error::Config(format!(
            "task (V={}, L={}) does not match config (V={}, L={})",
            task.vocab(),
            task.seq_len(),
            config.vocab,
            config.seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let model = MoeLanguageModel::new(&mut store, config.model_config(), &mut rng)?;
    let n = config.strategy.num_experts();
    let mut cluster = ExpertCluster::new(&ClusterConfig::new(config.workers, n)?, n)?;
    let mut adam = AdamState::new(&store);

    let mut metrics = Vec::with_capacity(config.steps);
    let mut initial = None;
    let mut over = 0usize;
    let mut divergence = None;
    for step in 0..config.steps {
        let batch = task.generate_batch(config.batch, step as u64);
        let mut g = Graph::new();
        let out = match model.forward(&mut g, &store, &mut cluster, &batch.inputs, &batch.targets) {
            Ok(out) => out,
            Err(e) if divergence_error(&e) => {
                divergence = Some(format!("step {step}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        cluster.report_mut().add_flops(g.flops());
        let loss = g.value(out.lm_loss).item();
        let layers: Vec<_> = out.moe_layers().collect();
        let record = StepMetrics {
            step,
            loss,
            aux_loss: g.value(out.aux_loss).item(),
            layers: layers.iter().map(|l| l.cost.name.clone()).collect(),
            cv: layers.iter().map(|l| l.load.cv).collect(),
            dropped_fraction: layers.iter().map(|l| l.plan.dropped_fraction()).collect(),
            flops: cluster.report().flops,
            comm_entries: cluster.report().comm_entries,
        };
        sink(&record)?;
        metrics.push(record);

        let base = *initial.get_or_insert(loss);
        over = if loss > DIVERGENCE_RATIO * base { over + 1 } else { 0 };
        if over >= DIVERGENCE_PATIENCE {
            divergence = Some(format!(
                "step {step}: loss above {DIVERGENCE_RATIO}x the initial {base:.4} for {DIVERGENCE_PATIENCE} steps"
            ));
            break;
        }

        let grads = g.backward(out.loss)?;
        store.zero_grads();
        grads.accumulate_into(&g, &mut store);
        if let Err(e) = adam_step(&mut store, &mut adam, &config.optimizer) {
            if divergence_error(&e) {
                divergence = Some(format!("step {step}: {e}"));
                break;
            }
            return Err(e);
        }
    }
    Ok(TrainOutcome {
        metrics,
        divergence,
        report: cluster.report().clone(),
    })
}
