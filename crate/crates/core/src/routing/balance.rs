use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

use super::plan::DispatchPlan;

/// Coefficient of variation `σ/μ` (population σ) of per-expert loads.
///
/// Returns `None` when the mean is zero. Single pass (Welford).
pub fn coefficient_of_variation(counts: &[f64]) -> Result<Option<f64>> {
    if counts.is_empty() {
        return Err(Error::Input("coefficient of variation of no experts".into()));
    }
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &c) in counts.iter().enumerate() {
        if !(c.is_finite() && c >= 0.0) {
            return Err(Error::Input(format!("load count {c} is not a non-negative number")));
        }
        let delta = c - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (c - mean);
    }
    if mean == 0.0 {
        return Ok(None);
    }
    let sigma = (m2.max(0.0) / counts.len() as f64).sqrt();
    Ok(Some(sigma / mean))
}

/// Real-token load per expert; padding never counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    pub counts: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    pub cv: Option<f64>,
}

impl LoadStats {
    pub fn from_counts(counts: &[usize]) -> Self {
        let f: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let n = f.len().max(1) as f64;
        let mean = f.iter().sum::<f64>() / n;
        let std = (f.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n).sqrt();
        let cv = coefficient_of_variation(&f).ok().flatten();
        Self {
            counts: counts.to_vec(),
            mean,
            std,
            cv,
        }
    }
}

/// Switch-style balancing loss `α·W·Σᵢ fᵢ·Pᵢ`, averaged over routers.
///
/// `probs` are the router outputs in expert order: one `[T×N]` matrix for
/// top-k, or `Z` matrices `[T×F]` for prototyping. For the router covering
/// experts `[r·W, (r+1)·W)`, `fᵢ` is the fraction of tokens whose first
/// selection inside that range is expert `i` (rank 0 for top-k, rank `r`
/// for prototyping) and `Pᵢ` is the mean router probability of expert `i`.
/// Gradient flows through `Pᵢ` only.
pub fn aux_balance_loss(g: &mut Graph, probs: &[Var], plan: &DispatchPlan, alpha: f64) -> Result<Var> {
    let t = plan.num_tokens();
    if t == 0 {
        return Err(Error::Input("balance loss over zero tokens".into()));
    }
    if probs.is_empty() {
        return Err(Error::Input("balance loss needs router probabilities".into()));
    }
    let width = g.shape(probs[0])[1];
    if width * probs.len() != plan.num_experts() {
        return Err(Error::dim(
            "aux_balance_loss",
            &[t, width * probs.len()],
            &[plan.num_tokens(), plan.num_experts()],
        ));
    }
    let routers = probs.len() as f64;
    let mut total: Option<Var> = None;
    for (r, &p) in probs.iter().enumerate() {
        if g.shape(p) != [t, width] {
            return Err(Error::dim("aux_balance_loss", g.shape(p), &[t, width]));
        }
        let range = r * width..(r + 1) * width;
        let mut frac = vec![0.0; width];
        for tok in 0..t {
            if let Some(a) = plan.token(tok).iter().find(|a| range.contains(&a.expert)) {
                frac[a.expert - range.start] += 1.0 / t as f64;
            }
        }
        let scale = alpha * width as f64 / (t as f64 * routers);
        let coeffs: Vec<f64> = (0..t).flat_map(|_| frac.iter().map(|f| f * scale)).collect();
        let term = g.dot_const(p, coeffs)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(total.expect("at least one router"))
}
