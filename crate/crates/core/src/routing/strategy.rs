use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoutingKind {
    /// One router over all experts; each token picks its `k` most probable.
    TopK { k: usize },
    /// Experts split into `prototypes` groups of `experts_per_prototype`,
    /// each group with its own router choosing exactly one expert.
    KTop1 {
        prototypes: usize,
        experts_per_prototype: usize,
    },
}

/// How tokens pick experts, together with the total expert count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoutingStrategy {
    kind: RoutingKind,
    num_experts: usize,
}

impl RoutingStrategy {
    pub fn top_k(k: usize, num_experts: usize) -> Result<Self> {
        if num_experts == 0 {
            return Err(Error::Config("expert count must be positive".into()));
        }
        if k == 0 || k > num_experts {
            return Err(Error::Config(format!(
                "top-k needs 1 <= k <= N, got k={k}, N={num_experts}"
            )));
        }
        Ok(Self {
            kind: RoutingKind::TopK { k },
            num_experts,
        })
    }

    pub fn k_top1(prototypes: usize, experts_per_prototype: usize) -> Result<Self> {
        if prototypes == 0 || experts_per_prototype == 0 {
            return Err(Error::Config(format!(
                "prototype count Z and experts per prototype F must be positive, got Z={prototypes}, F={experts_per_prototype}"
            )));
        }
        Ok(Self {
            kind: RoutingKind::KTop1 {
                prototypes,
                experts_per_prototype,
            },
            num_experts: prototypes * experts_per_prototype,
        })
    }

    /// Like [`Self::k_top1`] but checks `Z·F` against an expected expert count.
    pub fn k_top1_of(prototypes: usize, experts_per_prototype: usize, num_experts: usize) -> Result<Self> {
        if prototypes * experts_per_prototype != num_experts {
            return Err(Error::Config(format!(
                "Z*F must equal N: {prototypes}*{experts_per_prototype} != {num_experts}"
            )));
        }
        Self::k_top1(prototypes, experts_per_prototype)
    }

    /// Parses `top<k>` or `<Z>top1` (e.g. `top2`, `4top1`) for `num_experts` experts.
    pub fn parse(s: &str, num_experts: usize) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase().replace(['-', ' ', '_'], "");
        let bad = || Error::Config(format!("unrecognized routing strategy `{s}`"));
        if let Some(k) = t.strip_prefix("top") {
            return Self::top_k(k.parse().map_err(|_| bad())?, num_experts);
        }
        if let Some(z) = t.strip_suffix("top1") {
            let z: usize = z.parse().map_err(|_| bad())?;
            if z == 0 || !num_experts.is_multiple_of(z) {
                return Err(Error::Config(format!(
                    "{z} prototypes do not evenly split {num_experts} experts"
                )));
            }
            return Self::k_top1(z, num_experts / z);
        }
        Err(bad())
    }

    pub fn kind(&self) -> RoutingKind {
        self.kind
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    /// `k` for top-k, `Z` for prototyping.
    pub fn selections_per_token(&self) -> usize {
        match self.kind {
            RoutingKind::TopK { k } => k,
            RoutingKind::KTop1 { prototypes, .. } => prototypes,
        }
    }

    pub fn num_routers(&self) -> usize {
        match self.kind {
            RoutingKind::TopK { .. } => 1,
            RoutingKind::KTop1 { prototypes, .. } => prototypes,
        }
    }

    /// Output width of each router.
    pub fn router_width(&self) -> usize {
        match self.kind {
            RoutingKind::TopK { .. } => self.num_experts,
            RoutingKind::KTop1 {
                experts_per_prototype, ..
            } => experts_per_prototype,
        }
    }

    /// Compact spelling accepted by [`Self::parse`].
    pub fn key(&self) -> String {
        match self.kind {
            RoutingKind::TopK { k } => format!("top{k}"),
            RoutingKind::KTop1 { prototypes, .. } => format!("{prototypes}top1"),
        }
    }
}

impl fmt::Display for RoutingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            RoutingKind::TopK { k } => write!(f, "top-{k}"),
            RoutingKind::KTop1 { prototypes, .. } => write!(f, "{prototypes} top-1"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacityMode {
    /// Capacity grows with the number of selections per token ("k×").
    Standard,
    /// Every strategy gets the top-1 capacity ("1×").
    Limited,
}

impl CapacityMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "standard" | "kx" | "k" => Ok(Self::Standard),
            "limited" | "1x" | "1" => Ok(Self::Limited),
            other => Err(Error::Config(format!("unknown capacity mode `{other}`"))),
        }
    }

    pub fn key(&self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::Limited => "limited",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityConfig {
    pub tokens: usize,
    pub factor: f64,
    pub mode: CapacityMode,
}

fn ceil_guarded(x: f64) -> usize {
    // k·T·γ/N is often integral in exact arithmetic but lands a few ulps high
    (x - 1e-9 * x.abs().max(1.0)).ceil().max(0.0) as usize
}

/// Expert capacity `⌈k·T/N·γ⌉`, never below 1.
///
/// For prototyping each prototype behaves as an independent top-1 router over
/// `F` experts: `⌈T/F·γ⌉`. In limited mode that per-prototype value is
/// split evenly across the `Z` prototypes (rounded up), which reproduces the
/// top-1 baseline's slot count exactly.
pub fn capacity(cfg: &CapacityConfig, strategy: &RoutingStrategy) -> Result<usize> {
    if strategy.num_experts() == 0 {
        return Err(Error::Config("expert count must be positive".into()));
    }
    if !(cfg.factor.is_finite() && cfg.factor >= 1.0) {
        return Err(Error::Config(format!(
            "capacity factor must be >= 1.0, got {}",
            cfg.factor
        )));
    }
    let t = cfg.tokens as f64;
    let c = match (strategy.kind(), cfg.mode) {
        (RoutingKind::TopK { k }, CapacityMode::Standard) => {
            ceil_guarded(k as f64 * t / strategy.num_experts() as f64 * cfg.factor)
        }
        (RoutingKind::TopK { .. }, CapacityMode::Limited) => {
            ceil_guarded(t / strategy.num_experts() as f64 * cfg.factor)
        }
        (
            RoutingKind::KTop1 {
                experts_per_prototype, ..
            },
            CapacityMode::Standard,
        ) => ceil_guarded(t / experts_per_prototype as f64 * cfg.factor),
        (
            RoutingKind::KTop1 {
                prototypes,
                experts_per_prototype,
            },
            CapacityMode::Limited,
        ) => ceil_guarded(t / experts_per_prototype as f64 * cfg.factor).div_ceil(prototypes),
    };
    Ok(c.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(tokens: usize, factor: f64, mode: CapacityMode) -> CapacityConfig {
        CapacityConfig { tokens, factor, mode }
    }

    #[test]
    fn capacity_examples() {
        let top1 = RoutingStrategy::top_k(1, 32).unwrap();
        let top2 = RoutingStrategy::top_k(2, 32).unwrap();
        assert_eq!(capacity(&cfg(256, 1.25, CapacityMode::Standard), &top1).unwrap(), 10);
        assert_eq!(capacity(&cfg(256, 1.25, CapacityMode::Standard), &top2).unwrap(), 20);
        assert_eq!(capacity(&cfg(256, 1.25, CapacityMode::Limited), &top2).unwrap(), 10);
    }

    #[test]
    fn prototype_capacity_matches_topk_counterparts() {
        for (t, n, gamma) in [(256, 8, 1.25), (100, 4, 1.1), (37, 6, 1.0), (1000, 32, 2.0)] {
            for z in (1..=n).filter(|z| n % z == 0) {
                let kt = RoutingStrategy::k_top1(z, n / z).unwrap();
                let topz = RoutingStrategy::top_k(z, n).unwrap();
                let top1 = RoutingStrategy::top_k(1, n).unwrap();
                let std = cfg(t, gamma, CapacityMode::Standard);
                let lim = cfg(t, gamma, CapacityMode::Limited);
                assert_eq!(capacity(&std, &kt).unwrap(), capacity(&std, &topz).unwrap(), "T={t} N={n} Z={z}");
                assert_eq!(capacity(&lim, &kt).unwrap(), capacity(&std, &top1).unwrap(), "T={t} N={n} Z={z}");
            }
        }
    }

    #[test]
    fn capacity_is_at_least_one() {
        let s = RoutingStrategy::top_k(1, 64).unwrap();
        assert_eq!(capacity(&cfg(0, 1.0, CapacityMode::Standard), &s).unwrap(), 1);
        assert_eq!(capacity(&cfg(3, 1.0, CapacityMode::Standard), &s).unwrap(), 1);
    }

    #[test]
    fn capacity_rejects_small_factor() {
        let s = RoutingStrategy::top_k(1, 4).unwrap();
        assert!(capacity(&cfg(16, 0.5, CapacityMode::Standard), &s).is_err());
    }

    #[test]
    fn strategy_invariants() {
        assert!(RoutingStrategy::top_k(0, 4).is_err());
        assert!(RoutingStrategy::top_k(5, 4).is_err());
        assert!(RoutingStrategy::top_k(1, 0).is_err());
        assert!(RoutingStrategy::k_top1_of(3, 2, 4).is_err());
        let s = RoutingStrategy::k_top1_of(2, 2, 4).unwrap();
        assert_eq!(s.num_experts(), 4);
    }

    #[test]
    fn parse_round_trips_keys() {
        for key in ["top1", "top2", "top4", "2top1", "4top1", "1top1"] {
            let s = RoutingStrategy::parse(key, 8).unwrap();
            assert_eq!(s.key(), key);
        }
        assert_eq!(RoutingStrategy::parse("2 top-1", 8).unwrap().to_string(), "2 top-1");
        assert!(RoutingStrategy::parse("3top1", 8).is_err());
        assert!(RoutingStrategy::parse("bottom2", 8).is_err());
    }
}
