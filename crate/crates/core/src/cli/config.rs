//! Flat `[section]` / `key = value` experiment files.
//!
//! Every key name is unique across sections, so the section headers are
//! optional; a key placed under the wrong header is rejected.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster_sim::CompareConfig;
use crate::error::{Error, Result};
use crate::numerics::GradCheckOptions;
use crate::routing::{CapacityMode, RoutingStrategy};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Train,
    Compare,
    Gradcheck,
    BalanceStudy,
}

impl ExperimentKind {
    pub fn key(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::Compare => "compare",
            ExperimentKind::Gradcheck => "gradcheck",
            ExperimentKind::BalanceStudy => "balance-study",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "compare" => Ok(Self::Compare),
            "gradcheck" => Ok(Self::Gradcheck),
            "balance-study" => Ok(Self::BalanceStudy),
            _ => Err("expected train, compare, gradcheck or balance-study".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Model, task, optimizer, cluster, steps and seed.
    pub train: TrainConfig,
    /// Strategies measured by `compare`; all share `train.strategy`'s `N`.
    pub strategies: Vec<RoutingStrategy>,
    pub gradcheck: GradCheckOptions,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Single-block cost comparison at this config's sizes.
    pub fn compare_config(&self) -> CompareConfig {
        let t = &self.train;
        CompareConfig {
            model_dim: t.model_dim,
            hidden_dim: t.hidden_dim,
            num_experts: t.strategy.num_experts(),
            tokens: t.tokens(),
            seq_len: t.seq_len,
            heads: t.heads,
            capacity_factor: t.capacity_factor,
            workers: t.workers,
            seed: t.seed,
        }
    }
}

const SECTIONS: &[(&str, &[&str])] = &[
    ("experiment", &["kind", "seed", "steps", "out"]),
    ("task", &["vocab", "clusters", "branching", "seq_len", "batch"]),
    (
        "model",
        &[
            "layers",
            "M",
            "I",
            "heads",
            "N",
            "strategy",
            "k",
            "Z",
            "F",
            "capacity_mode",
            "capacity_factor",
            "aux_alpha",
            "renormalize_gates",
            "moe_attention",
        ],
    ),
    ("cluster", &["workers"]),
    ("optimizer", &["lr", "beta1", "beta2", "eps", "weight_decay", "warmup"]),
    ("compare", &["strategies"]),
    ("gradcheck", &["fd_eps", "tolerance"]),
];

fn section_of(key: &str) -> Option<&'static str> {
    SECTIONS.iter().find(|(_, keys)| keys.contains(&key)).map(|(s, _)| *s)
}

struct Entry {
    value: String,
    line: usize,
}

struct Entries {
    map: HashMap<&'static str, Entry>,
}

impl Entries {
    fn parse<T: FromStr>(&self, key: &'static str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.get(key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|err| Error::Parse {
                line: e.line,
                key: key.into(),
                message: format!("invalid value `{}`: {err}", e.value),
            }),
        }
    }

    fn set<T: FromStr>(&self, key: &'static str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.parse(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn fail(&self, key: &'static str, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.map.get(key).map_or(0, |e| e.line),
            key: key.into(),
            message: message.into(),
        }
    }
}

fn tokenize(text: &str) -> Result<Entries> {
    let mut map: HashMap<&'static str, Entry> = HashMap::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|c| c.strip_suffix(']')) {
            let name = name.trim();
            if !SECTIONS.iter().any(|(s, _)| *s == name) {
                return Err(Error::Parse {
                    line,
                    key: name.into(),
                    message: "unknown section".into(),
                });
            }
            section = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::Parse {
                line,
                key: content.into(),
                message: "expected `key = value`".into(),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        let Some(home) = section_of(key) else {
            return Err(Error::Parse {
                line,
                key: key.into(),
                message: "unknown key".into(),
            });
        };
        if let Some(s) = &section {
            if s != home {
                return Err(Error::Parse {
                    line,
                    key: key.into(),
                    message: format!("belongs in [{home}], found in [{s}]"),
                });
            }
        }
        let canonical = SECTIONS
            .iter()
            .flat_map(|(_, keys)| keys.iter())
            .find(|k| **k == key)
            .copied()
            .expect("section_of found it");
        if let Some(first) = map.get(canonical) {
            return Err(Error::Parse {
                line,
                key: key.into(),
                message: format!("duplicate key, first set on line {}", first.line),
            });
        }
        map.insert(
            canonical,
            Entry {
                value: value.to_string(),
                line,
            },
        );
    }
    Ok(Entries { map })
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn resolve_strategy(e: &Entries, n: usize) -> Result<RoutingStrategy> {
    let name = e.parse::<String>("strategy")?.unwrap_or_else(|| "top1".into());
    let k: Option<usize> = e.parse("k")?;
    let z: Option<usize> = e.parse("Z")?;
    let f: Option<usize> = e.parse("F")?;
    let as_parse = |err: Error, key: &'static str| match err {
        Error::Config(m) => e.fail(key, m),
        other => other,
    };
    let strategy = match name.as_str() {
        "topk" => {
            let k = k.ok_or_else(|| e.fail("strategy", "`topk` needs k"))?;
            RoutingStrategy::top_k(k, n).map_err(|err| as_parse(err, "k"))?
        }
        "ktop1" => {
            let (z, f) = match (z, f) {
                (Some(z), Some(f)) => (z, f),
                (Some(z), None) if z > 0 && n.is_multiple_of(z) => (z, n / z),
                (None, Some(f)) if f > 0 && n.is_multiple_of(f) => (n / f, f),
                _ => return Err(e.fail("strategy", "`ktop1` needs Z and F with Z*F = N")),
            };
            let key = if e.map.contains_key("F") { "F" } else { "Z" };
            RoutingStrategy::k_top1_of(z, f, n).map_err(|err| as_parse(err, key))?
        }
        other => RoutingStrategy::parse(other, n).map_err(|err| as_parse(err, "strategy"))?,
    };
    let s = strategy.selections_per_token();
    let mismatch = match strategy.kind() {
        crate::routing::RoutingKind::TopK { k: sk } => {
            k.is_some_and(|k| k != sk) || z.is_some() || f.is_some()
        }
        crate::routing::RoutingKind::KTop1 {
            prototypes,
            experts_per_prototype,
        } => k.is_some_and(|k| k != s) || z.is_some_and(|z| z != prototypes) || f.is_some_and(|f| f != experts_per_prototype),
    };
    if mismatch {
        let key = ["k", "Z", "F"].into_iter().find(|k| e.map.contains_key(k)).unwrap_or("strategy");
        return Err(e.fail(key, format!("inconsistent with strategy {strategy}")));
    }
    Ok(strategy)
}

/// Parses and validates an experiment file; missing keys take defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let e = tokenize(text)?;
    let n: usize = e.parse("N")?.unwrap_or(8);
    if n == 0 {
        return Err(e.fail("N", "must be positive"));
    }
    let strategy = resolve_strategy(&e, n)?;
    let mut t = TrainConfig::toy(strategy);
    e.set("seed", &mut t.seed)?;
    e.set("steps", &mut t.steps)?;
    e.set("vocab", &mut t.vocab)?;
    e.set("clusters", &mut t.clusters)?;
    e.set("branching", &mut t.branching)?;
    e.set("seq_len", &mut t.seq_len)?;
    e.set("batch", &mut t.batch)?;
    e.set("layers", &mut t.layers)?;
    e.set("M", &mut t.model_dim)?;
    e.set("I", &mut t.hidden_dim)?;
    e.set("heads", &mut t.heads)?;
    if let Some(m) = e.parse::<String>("capacity_mode")? {
        t.capacity_mode = CapacityMode::parse(&m).map_err(|err| e.fail("capacity_mode", err.to_string()))?;
    }
    e.set("capacity_factor", &mut t.capacity_factor)?;
    e.set("aux_alpha", &mut t.aux_alpha)?;
    for (key, slot) in [("renormalize_gates", &mut t.renormalize_gates), ("moe_attention", &mut t.moe_attention)] {
        if let Some(entry) = e.map.get(key) {
            *slot = parse_bool(&entry.value).map_err(|m| e.fail(key, m))?;
        }
    }
    e.set("workers", &mut t.workers)?;
    e.set("lr", &mut t.optimizer.lr)?;
    e.set("beta1", &mut t.optimizer.beta1)?;
    e.set("beta2", &mut t.optimizer.beta2)?;
    e.set("eps", &mut t.optimizer.eps)?;
    e.set("weight_decay", &mut t.optimizer.weight_decay)?;
    e.set("warmup", &mut t.optimizer.warmup)?;

    let kind = e.parse::<ExperimentKind>("kind")?.unwrap_or(ExperimentKind::Train);
    let strategies = match e.map.get("strategies") {
        Some(entry) => entry
            .value
            .split(',')
            .map(|s| RoutingStrategy::parse(s.trim(), n).map_err(|err| e.fail("strategies", err.to_string())))
            .collect::<Result<Vec<_>>>()?,
        None => ["top1", "top2", "top4", "2top1", "4top1"]
            .iter()
            .filter_map(|s| RoutingStrategy::parse(s, n).ok())
            .collect(),
    };
    if strategies.is_empty() {
        return Err(e.fail("strategies", "no strategy fits N"));
    }
    let mut gradcheck = GradCheckOptions {
        tolerance: 1e-4,
        ..GradCheckOptions::default()
    };
    e.set("fd_eps", &mut gradcheck.eps)?;
    e.set("tolerance", &mut gradcheck.tolerance)?;
    if !(gradcheck.eps.is_finite() && gradcheck.eps > 0.0 && gradcheck.tolerance.is_finite() && gradcheck.tolerance > 0.0) {
        return Err(e.fail("fd_eps", "fd_eps and tolerance must be positive"));
    }
    let out = e.parse::<String>("out")?.map(PathBuf::from);

    validate(&e, &t)?;
    Ok(ExperimentConfig {
        kind,
        train: t,
        strategies,
        gradcheck,
        out,
    })
}

/// Runs the model-level checks and blames the first key involved.
fn validate(e: &Entries, t: &TrainConfig) -> Result<()> {
    let checks: [(&'static str, bool, &str); 9] = [
        ("vocab", t.vocab >= 2, "must be at least 2"),
        ("clusters", t.clusters >= 1, "must be positive"),
        ("branching", t.branching >= 1 && t.branching <= t.vocab, "must be in 1..=vocab"),
        ("seq_len", t.seq_len >= 1, "must be positive"),
        ("layers", t.layers >= 1, "must be positive"),
        ("M", t.model_dim >= 1 && t.hidden_dim >= 1, "M and I must be positive"),
        ("heads", t.heads >= 1 && t.model_dim.is_multiple_of(t.heads), "must divide M"),
        ("capacity_factor", t.capacity_factor >= 1.0, "must be >= 1"),
        ("workers", t.workers >= 1 && t.strategy.num_experts().is_multiple_of(t.workers), "must divide N"),
    ];
    for (key, ok, message) in checks {
        if !ok {
            return Err(e.fail(key, message));
        }
    }
    t.validate().map_err(|err| e.fail("steps", err.to_string()))
}

/// Canonical text for `config`; parsing it yields `config` again.
pub fn effective_config(config: &ExperimentConfig) -> String {
    let t = &config.train;
    let o = &t.optimizer;
    let mut s = String::new();
    let _ = writeln!(s, "[experiment]\nkind = {}\nseed = {}\nsteps = {}", config.kind.key(), t.seed, t.steps);
    if let Some(out) = &config.out {
        let _ = writeln!(s, "out = {}", out.display());
    }
    let _ = writeln!(
        s,
        "\n[task]\nvocab = {}\nclusters = {}\nbranching = {}\nseq_len = {}\nbatch = {}",
        t.vocab, t.clusters, t.branching, t.seq_len, t.batch
    );
    let _ = writeln!(
        s,
        "\n[model]\nlayers = {}\nM = {}\nI = {}\nheads = {}\nN = {}\nstrategy = {}\ncapacity_mode = {}\ncapacity_factor = {}\naux_alpha = {}\nrenormalize_gates = {}\nmoe_attention = {}",
        t.layers,
        t.model_dim,
        t.hidden_dim,
        t.heads,
        t.strategy.num_experts(),
        t.strategy.key(),
        t.capacity_mode.key(),
        t.capacity_factor,
        t.aux_alpha,
        t.renormalize_gates,
        t.moe_attention
    );
    let _ = writeln!(s, "\n[cluster]\nworkers = {}", t.workers);
    let _ = writeln!(
        s,
        "\n[optimizer]\nlr = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nweight_decay = {}\nwarmup = {}",
        o.lr, o.beta1, o.beta2, o.eps, o.weight_decay, o.warmup
    );
    let names: Vec<String> = config.strategies.iter().map(RoutingStrategy::key).collect();
    let _ = writeln!(s, "\n[compare]\nstrategies = {}", names.join(", "));
    let _ = writeln!(
        s,
        "\n[gradcheck]\nfd_eps = {}\ntolerance = {}",
        config.gradcheck.eps, config.gradcheck.tolerance
    );
    s
}
