//! Gating, top-k and prototyped expert selection, capacity, dispatch plans
//! and load-balance metrics.

mod balance;
mod plan;
mod select;
mod strategy;

pub use balance::{aux_balance_loss, coefficient_of_variation, LoadStats};
pub use plan::{build_dispatch_plan, Assignment, DispatchPlan};
pub use select::{
    gate, route, select_prototyped, select_prototyped_from_probs, select_topk, selected_weights, topk_indices, Choice,
    Routed, Selections,
};
pub use strategy::{capacity, CapacityConfig, CapacityMode, RoutingKind, RoutingStrategy};

/// Default weight of the balancing loss.
pub const DEFAULT_AUX_ALPHA: f64 = 0.01;
