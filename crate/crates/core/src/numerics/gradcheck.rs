//! Central finite-difference verification of tape gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error. Each entry's floor is
    /// raised further to the roundoff resolution of its central difference.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-5,
            abs_floor: 1e-7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    /// A `±eps` probe changed a discrete decision (expert selection, drop,
    /// relu kink), so the central difference does not estimate the gradient.
    Inconclusive,
}

#[derive(Clone, Debug)]
pub struct EntryCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<EntryCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.entries.len()
    }

    pub fn count(&self, verdict: Verdict) -> usize {
        self.entries.iter().filter(|e| e.verdict == verdict).count()
    }

    /// Passes iff no conclusive entry exceeded the tolerance.
    pub fn passed(&self) -> bool {
        self.count(Verdict::Fail) == 0
    }

    pub fn worst(&self) -> Option<&EntryCheck> {
        self.entries
            .iter()
            .filter(|e| e.verdict != Verdict::Inconclusive)
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Rounding units of `f` assumed to survive evaluation and the `f(θ+ε) − f(θ−ε)`
/// cancellation. Intermediate sums can be much larger than `f` itself.
const ROUNDOFF_ULPS: f64 = 64.0;

/// Smallest derivative difference a central difference at `eps` can resolve
/// when `|f|` is about `scale`.
pub fn roundoff_resolution(scale: f64, eps: f64) -> f64 {
    ROUNDOFF_ULPS * f64::EPSILON * scale / (2.0 * eps)
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &mut F, store: &ParamStore) -> Result<(f64, Option<u64>)>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    g.track_discrete(true);
    let out = f(&mut g, store)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Input("gradient check needs a scalar function".into()));
    }
    let value = v.item();
    if !value.is_finite() {
        return Err(Error::Evaluation("function is non-finite at a probe point".into()));
    }
    Ok((value, g.discrete_signature()))
}

/// Compares tape gradients of the scalar `f` against central differences for
/// every entry of every parameter in `store`.
///
/// `f` must be deterministic. Parameter values are restored afterwards and
/// the stored gradients hold the analytic gradient at the base point.
pub fn finite_diff_check<F>(store: &mut ParamStore, mut f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    g.track_discrete(true);
    let out = f(&mut g, store)?;
    let base_sig = g.discrete_signature();
    let grads = g.backward(out)?;
    store.zero_grads();
    grads.accumulate_into(&g, store);
    drop(g);

    let ids: Vec<_> = store.ids().collect();
    let mut entries = Vec::new();
    for id in ids {
        let n = store.value(id).numel();
        for index in 0..n {
            let analytic = store.value(id).grad().expect("grad allocated")[index];
            let orig = store.value(id).data()[index];

            store.get_mut(id).value.data_mut()[index] = orig + opts.eps;
            let plus = evaluate(&mut f, store);
            store.get_mut(id).value.data_mut()[index] = orig - opts.eps;
            let minus = evaluate(&mut f, store);
            store.get_mut(id).value.data_mut()[index] = orig;
            let ((fp, sp), (fm, sm)) = (plus?, minus?);

            let numeric = (fp - fm) / (2.0 * opts.eps);
            let resolution = roundoff_resolution(fp.abs().max(fm.abs()), opts.eps);
            let floor = opts.abs_floor.max(resolution / opts.tolerance);
            let rel_error = relative_error(analytic, numeric, floor);
            let verdict = if sp != base_sig || sm != base_sig {
                Verdict::Inconclusive
            } else if rel_error < opts.tolerance {
                Verdict::Pass
            } else {
                Verdict::Fail
            };
            entries.push(EntryCheck {
                param: store.get(id).name.clone(),
                index,
                analytic,
                numeric,
                rel_error,
                verdict,
            });
        }
    }
    let max_rel_error = entries
        .iter()
        .filter(|e| e.verdict != Verdict::Inconclusive)
        .map(|e| e.rel_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_error,
        tolerance: opts.tolerance,
    })
}
