use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster_sim::{Direction, ExpertCluster, LayerCost};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::routing::{
    aux_balance_loss, build_dispatch_plan, capacity, route, CapacityConfig, CapacityMode, DispatchPlan, LoadStats,
    RoutingStrategy, DEFAULT_AUX_ALPHA,
};

/// Feed-forward expert `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Copy, Debug)]
pub struct ExpertParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub enum Expert {
    Ffn(ExpertParams),
    /// Single affine map `x·W + b`, used for MoE attention projections.
    Linear { w: ParamId, b: ParamId },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeLayerConfig {
    pub strategy: RoutingStrategy,
    pub capacity_factor: f64,
    pub capacity_mode: CapacityMode,
    pub aux_alpha: f64,
    /// Renormalize selected probabilities instead of re-applying softmax.
    pub renormalize_gates: bool,
    /// Replace the attention projections with MoE layers too.
    pub moe_attention: bool,
}

impl MoeLayerConfig {
    pub fn new(strategy: RoutingStrategy) -> Self {
        Self {
            strategy,
            capacity_factor: 1.25,
            capacity_mode: CapacityMode::Standard,
            aux_alpha: DEFAULT_AUX_ALPHA,
            renormalize_gates: false,
            moe_attention: false,
        }
    }
}

/// Everything one MoE layer invocation produced.
pub struct MoeOutput {
    pub output: Var,
    pub plan: DispatchPlan,
    pub load: LoadStats,
    /// Unweighted balancing term `W·Σ fᵢ·Pᵢ` (1.0 when perfectly balanced).
    pub balance: Var,
    /// `aux_alpha` times `balance`.
    pub aux_loss: Var,
    pub cost: LayerCost,
}

/// Gathers each expert's `[C×M]` input buffer; unfilled slots are zero padding.
pub fn dispatch(g: &mut Graph, x: Var, plan: &DispatchPlan) -> Result<Vec<Var>> {
    if g.shape(x).len() != 2 || g.shape(x)[0] != plan.num_tokens() {
        return Err(Error::Config(format!(
            "plan covers {} tokens but input has shape {:?}",
            plan.num_tokens(),
            g.shape(x)
        )));
    }
    (0..plan.num_experts())
        .map(|e| g.gather_rows(x, plan.buffer_rows(e)))
        .collect()
}

pub fn expert_ffn(g: &mut Graph, store: &ParamStore, buffer: Var, params: &ExpertParams) -> Result<Var> {
    let w1 = g.param(store, params.w1)?;
    let b1 = g.param(store, params.b1)?;
    let w2 = g.param(store, params.w2)?;
    let b2 = g.param(store, params.b2)?;
    let h = g.matmul(buffer, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h)?;
    let y = g.matmul(h, w2)?;
    g.add_row(y, b2)
}

fn expert_forward(g: &mut Graph, store: &ParamStore, buffer: Var, expert: &Expert) -> Result<Var> {
    match expert {
        Expert::Ffn(p) => expert_ffn(g, store, buffer, p),
        Expert::Linear { w, b } => {
            let (w, b) = (g.param(store, *w)?, g.param(store, *b)?);
            let y = g.matmul(buffer, w)?;
            g.add_row(y, b)
        }
    }
}

/// Weighted sum of surviving expert outputs per token; tokens whose every
/// selection was dropped pass through unchanged.
pub fn combine(g: &mut Graph, outputs: Vec<Var>, weights: Var, plan: &DispatchPlan, x: Var) -> Result<Var> {
    g.combine(outputs, weights, x, plan.combine_routes())
}

/// A routed layer of `N` experts.
pub struct MoeLayer {
    name: String,
    model_dim: usize,
    config: MoeLayerConfig,
    routers: Vec<ParamId>,
    experts: Vec<Expert>,
}

impl MoeLayer {
    fn add_routers<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        model_dim: usize,
        config: &MoeLayerConfig,
        rng: &mut R,
    ) -> Result<Vec<ParamId>> {
        let s = &config.strategy;
        let std = 1.0 / (model_dim as f64).sqrt();
        (0..s.num_routers())
            .map(|r| store.add(format!("{name}.router{r}"), Tensor::randn(&[model_dim, s.router_width()], std, rng)))
            .collect()
    }

    /// Layer of feed-forward experts of width `hidden`.
    pub fn ffn<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        model_dim: usize,
        hidden: usize,
        config: MoeLayerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let n = config.strategy.num_experts();
        let mut experts = Vec::with_capacity(n);
        for e in 0..n {
            let p = ExpertParams {
                w1: store.add(
                    format!("{name}.expert{e}.w1"),
                    Tensor::randn(&[model_dim, hidden], 1.0 / (model_dim as f64).sqrt(), rng),
                )?,
                b1: store.add(format!("{name}.expert{e}.b1"), Tensor::zeros(&[hidden]))?,
                w2: store.add(
                    format!("{name}.expert{e}.w2"),
                    Tensor::randn(&[hidden, model_dim], 1.0 / (hidden as f64).sqrt(), rng),
                )?,
                b2: store.add(format!("{name}.expert{e}.b2"), Tensor::zeros(&[model_dim]))?,
            };
            experts.push(Expert::Ffn(p));
        }
        let routers = Self::add_routers(store, name, model_dim, &config, rng)?;
        Ok(Self {
            name: name.to_string(),
            model_dim,
            config,
            routers,
            experts,
        })
    }

    /// Layer whose experts are single `[M×M]` affine maps.
    pub fn linear<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        model_dim: usize,
        config: MoeLayerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let n = config.strategy.num_experts();
        let std = 1.0 / (model_dim as f64).sqrt();
        let mut experts = Vec::with_capacity(n);
        for e in 0..n {
            experts.push(Expert::Linear {
                w: store.add(format!("{name}.expert{e}.w"), Tensor::randn(&[model_dim, model_dim], std, rng))?,
                b: store.add(format!("{name}.expert{e}.b"), Tensor::zeros(&[model_dim]))?,
            });
        }
        let routers = Self::add_routers(store, name, model_dim, &config, rng)?;
        Ok(Self {
            name: name.to_string(),
            model_dim,
            config,
            routers,
            experts,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> &MoeLayerConfig {
        &self.config
    }

    pub fn routers(&self) -> &[ParamId] {
        &self.routers
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    /// gate → select → plan → dispatch → experts → combine. Tokens whose
    /// every selection was dropped come out equal to their input row.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, cluster: &mut ExpertCluster, x: Var) -> Result<MoeOutput> {
        self.forward_with_passthrough(g, store, cluster, x, x)
    }

    /// As [`MoeLayer::forward`], but fully dropped tokens take their row of
    /// `passthrough` instead of their input row.
    pub fn forward_with_passthrough(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cluster: &mut ExpertCluster,
        x: Var,
        passthrough: Var,
    ) -> Result<MoeOutput> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.model_dim {
            return Err(Error::dim("moe_layer", &shape, &[0, self.model_dim]));
        }
        let start = g.flops();
        let strategy = &self.config.strategy;
        let routers = self.routers.iter().map(|&r| g.param(store, r)).collect::<Result<Vec<_>>>()?;
        let routed = route(g, x, &routers, strategy, self.config.renormalize_gates)?;
        let cap = capacity(
            &CapacityConfig {
                tokens: shape[0],
                factor: self.config.capacity_factor,
                mode: self.config.capacity_mode,
            },
            strategy,
        )?;
        let plan = build_dispatch_plan(&routed.selections, cap);
        let drops: Vec<usize> = plan.assignments().iter().map(|a| a.slot.map_or(usize::MAX, |s| s)).collect();
        g.record_discrete(&drops);

        let comm_before = cluster.report().comm_entries;
        let buffers = dispatch(g, x, &plan)?;
        let buffers = cluster.all_to_all(g, buffers, &plan, Direction::Dispatch)?;

        let expert_start = g.flops();
        let mut outputs = Vec::with_capacity(self.experts.len());
        for worker in 0..cluster.placement().workers() {
            let hosted: Vec<usize> = cluster.placement().experts_on(worker).collect();
            for e in hosted {
                outputs.push((e, expert_forward(g, store, buffers[e], &self.experts[e])?));
            }
        }
        outputs.sort_by_key(|(e, _)| *e);
        let outputs: Vec<Var> = outputs.into_iter().map(|(_, v)| v).collect();
        let expert_flops = g.flops() - expert_start;

        let outputs = cluster.all_to_all(g, outputs, &plan, Direction::Combine)?;
        let comm = cluster.report().comm_entries - comm_before;
        let output = combine(g, outputs, routed.weights, &plan, passthrough)?;
        let balance = aux_balance_loss(g, &routed.probs, &plan, 1.0)?;
        let aux_loss = g.scale(balance, self.config.aux_alpha)?;

        let cost = LayerCost {
            name: self.name.clone(),
            capacity: cap,
            expert_flops,
            layer_flops: g.flops() - start,
            comm_entries: comm,
            dropped: plan.dropped_count(),
            selections: plan.total_selections(),
        };
        cluster.report_mut().record_layer(&cost);
        Ok(MoeOutput {
            output,
            load: plan.load_stats(),
            plan,
            balance,
            aux_loss,
            cost,
        })
    }
}
