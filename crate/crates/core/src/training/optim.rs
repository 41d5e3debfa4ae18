use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

/// AdamW settings. The learning rate ramps linearly over `warmup` steps and
/// then stays constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup: usize,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup: 0,
        }
    }
}

impl AdamHyper {
    /// Learning rate used by update number `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: usize,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    /// Updates applied so far.
    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// One AdamW update from the gradients held in `store`.
///
/// Nothing is modified if any gradient entry is non-finite.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Config(format!(
            "optimizer state tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (_, p) in store.iter() {
        let grad = p.value.grad().unwrap_or(&[]);
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Evaluation(format!("non-finite gradient {} at {}[{i}]", grad[i], p.name)));
        }
    }
    let lr = hyper.lr_at(state.steps);
    state.steps += 1;
    let t = state.steps as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        let value = &mut store.get_mut(id).value;
        let grad = value.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; m.len()]);
        for (i, theta) in value.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
            let step = (m[i] / c1) / ((v[i] / c2).sqrt() + hyper.eps);
            *theta -= lr * hyper.weight_decay * *theta + lr * step;
        }
    }
    Ok(())
}
