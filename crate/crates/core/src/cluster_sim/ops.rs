use serde::{Deserialize, Serialize};

use crate::routing::{RoutingKind, RoutingStrategy};

/// Comparison count of the expert-selection step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingOpCount {
    pub total: u64,
    /// Longest chain of dependent comparisons for one token.
    pub critical_path: u64,
}

/// Counts expert-selection comparisons for `tokens` tokens.
///
/// Top-k runs `k` dependent argmax sweeps over all `N` experts (`N`
/// comparisons each), so its critical path is `k·N`. Prototyping runs `Z`
/// independent sweeps of width `F` side by side: critical path `F`.
pub fn routing_op_count(strategy: &RoutingStrategy, tokens: usize) -> RoutingOpCount {
    let t = tokens as u64;
    match strategy.kind() {
        RoutingKind::TopK { k } => {
            let per_token = (k * strategy.num_experts()) as u64;
            RoutingOpCount {
                total: t * per_token,
                critical_path: per_token,
            }
        }
        RoutingKind::KTop1 {
            prototypes,
            experts_per_prototype,
        } => RoutingOpCount {
            total: t * (prototypes * experts_per_prototype) as u64,
            critical_path: experts_per_prototype as u64,
        },
    }
}
