//! Gating and expert selection.

use crate::error::{Error, Result};
use crate::numerics::{softmax_along, Graph, Tensor, Var};

use super::strategy::{RoutingKind, RoutingStrategy};

/// One expert picked for one token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Choice {
    pub expert: usize,
    pub weight: f64,
}

/// Per-token expert choices in selection-rank order.
#[derive(Clone, Debug, PartialEq)]
pub struct Selections {
    pub num_experts: usize,
    pub per_token: Vec<Vec<Choice>>,
}

impl Selections {
    pub fn num_tokens(&self) -> usize {
        self.per_token.len()
    }

    pub fn total(&self) -> usize {
        self.per_token.iter().map(Vec::len).sum()
    }

    pub fn experts_of(&self, token: usize) -> Vec<usize> {
        self.per_token[token].iter().map(|c| c.expert).collect()
    }
}

/// Router probabilities `softmax(x·W_g)` on the tape.
pub fn gate(g: &mut Graph, x: Var, router: Var) -> Result<Var> {
    let logits = g.matmul(x, router).map_err(non_finite_as_eval)?;
    g.softmax(logits, 1).map_err(non_finite_as_eval)
}

fn non_finite_as_eval(e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Evaluation(format!("non-finite router logits ({op})")),
        other => other,
    }
}

/// Indices of the `k` largest entries by repeated argmax sweeps, largest
/// first; ties go to the lower index.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; row.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (j, &v) in row.iter().enumerate() {
            if taken[j] {
                continue;
            }
            if best.is_none_or(|b| v > row[b]) {
                best = Some(j);
            }
        }
        let b = best.expect("k <= row length");
        taken[b] = true;
        out.push(b);
    }
    out
}

/// Gate weights over the selected probabilities: a softmax of the selected
/// values, or their renormalization when `renormalize` is set.
pub fn selected_weights(values: &[f64], renormalize: bool) -> Vec<f64> {
    if renormalize {
        let s: f64 = values.iter().sum();
        values.iter().map(|v| v / s).collect()
    } else {
        softmax_along(values, &[values.len()], 0)
    }
}

/// Top-k selection on a row-stochastic `[T×N]` probability matrix.
pub fn select_topk(probs: &Tensor, k: usize, renormalize: bool) -> Result<Selections> {
    if probs.rank() != 2 {
        return Err(Error::dim("select_topk", probs.shape(), &[0, 0]));
    }
    let n = probs.cols();
    if k == 0 || k > n {
        return Err(Error::Config(format!("top-k needs 1 <= k <= N, got k={k}, N={n}")));
    }
    let per_token = (0..probs.rows())
        .map(|t| {
            let row = probs.row(t);
            let idx = topk_indices(row, k);
            let vals: Vec<f64> = idx.iter().map(|&j| row[j]).collect();
            idx.into_iter()
                .zip(selected_weights(&vals, renormalize))
                .map(|(expert, weight)| Choice { expert, weight })
                .collect()
        })
        .collect();
    Ok(Selections {
        num_experts: n,
        per_token,
    })
}

/// Top-1 within each prototype given per-prototype `[T×F]` probabilities.
///
/// The weight is the chosen expert's raw probability. Global expert index of
/// prototype `z`'s local expert `j` is `z·F + j`.
pub fn select_prototyped_from_probs(probs: &[Tensor]) -> Result<Selections> {
    let first = probs.first().ok_or_else(|| Error::Config("no prototype routers".into()))?;
    let (t, f) = (first.rows(), first.cols());
    for p in probs {
        if p.rank() != 2 || p.shape() != [t, f] {
            return Err(Error::Config(format!(
                "prototype router outputs disagree: {:?} vs {:?}",
                p.shape(),
                first.shape()
            )));
        }
    }
    let per_token = (0..t)
        .map(|tok| {
            probs
                .iter()
                .enumerate()
                .map(|(z, p)| {
                    let row = p.row(tok);
                    let j = topk_indices(row, 1)[0];
                    Choice {
                        expert: z * f + j,
                        weight: row[j],
                    }
                })
                .collect()
        })
        .collect();
    Ok(Selections {
        num_experts: probs.len() * f,
        per_token,
    })
}

/// Prototyped routing straight from token representations and the `Z`
/// router matrices (`[M×F]` each).
pub fn select_prototyped(x: &Tensor, routers: &[Tensor]) -> Result<Selections> {
    let first = routers.first().ok_or_else(|| Error::Config("no prototype routers".into()))?;
    if routers.iter().any(|r| r.rank() != 2 || r.shape() != first.shape()) || x.rank() != 2 || x.cols() != first.shape()[0] {
        return Err(Error::Config(format!(
            "router shapes do not match token width {:?}",
            x.shape()
        )));
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone())?;
    let mut probs = Vec::with_capacity(routers.len());
    for r in routers {
        let rv = g.input(r.clone())?;
        let p = gate(&mut g, xv, rv)?;
        probs.push(g.value(p).clone());
    }
    select_prototyped_from_probs(&probs)
}

/// Routing decisions for one layer, with differentiable gate weights.
pub struct Routed {
    pub selections: Selections,
    /// `[T×S]` gate weights, column `r` holding each token's rank-`r` weight.
    pub weights: Var,
    /// Router probability matrices in expert order (one for top-k, `Z` for prototyping).
    pub probs: Vec<Var>,
}

/// Runs the strategy's routers on `x` and records the choices on the tape.
pub fn route(
    g: &mut Graph,
    x: Var,
    routers: &[Var],
    strategy: &RoutingStrategy,
    renormalize: bool,
) -> Result<Routed> {
    if routers.len() != strategy.num_routers() {
        return Err(Error::Config(format!(
            "{} needs {} routers, got {}",
            strategy,
            strategy.num_routers(),
            routers.len()
        )));
    }
    let width = g.shape(x).get(1).copied().unwrap_or(0);
    for &r in routers {
        if g.shape(r) != [width, strategy.router_width()] {
            return Err(Error::Config(format!(
                "router shape {:?} does not match [{width}, {}]",
                g.shape(r),
                strategy.router_width()
            )));
        }
    }
    let probs = routers.iter().map(|&r| gate(g, x, r)).collect::<Result<Vec<_>>>()?;
    let (selections, weights) = match strategy.kind() {
        RoutingKind::TopK { k } => {
            let sel = select_topk(g.value(probs[0]), k, renormalize)?;
            let picks: Vec<Vec<usize>> = (0..sel.num_tokens()).map(|t| sel.experts_of(t)).collect();
            let chosen = g.gather_cols(probs[0], picks)?;
            let w = if renormalize { g.normalize_rows(chosen)? } else { g.softmax(chosen, 1)? };
            (sel, w)
        }
        RoutingKind::KTop1 {
            experts_per_prototype: f,
            ..
        } => {
            let values: Vec<Tensor> = probs.iter().map(|&p| g.value(p).clone()).collect();
            let sel = select_prototyped_from_probs(&values)?;
            let mut cols = Vec::with_capacity(probs.len());
            for (z, &p) in probs.iter().enumerate() {
                let picks = sel.per_token.iter().map(|c| vec![c[z].expert - z * f]).collect();
                cols.push(g.gather_cols(p, picks)?);
            }
            let w = if cols.len() == 1 { cols[0] } else { g.concat_cols(cols)? };
            (sel, w)
        }
    };
    let flat: Vec<usize> = selections.per_token.iter().flatten().map(|c| c.expert).collect();
    g.record_discrete(&flat);
    Ok(Routed {
        selections,
        weights,
        probs,
    })
}
