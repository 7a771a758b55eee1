//! Adam with bias correction over a [`ParamStore`].

use super::{AutodiffError, ParamStore, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates plus the step counter.
pub struct AdamState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .ids()
            .map(|id| Tensor::zeros(store.value(id).raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState { step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn raw_parts(&self) -> (u64, &[Tensor], &[Tensor]) {
        (self.step, &self.m, &self.v)
    }

    pub(crate) fn from_raw_parts(step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Self {
        AdamState { step, m, v }
    }
}

/// One bias-corrected Adam update from the store's accumulated gradients.
/// Rejects the whole step if any gradient is non-finite, leaving parameters
/// and state untouched. Clears gradients on success.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), AutodiffError> {
    if state.m.len() != store.len() {
        return Err(AutodiffError::StateMismatch {
            state: state.m.len(),
            store: store.len(),
        });
    }
    for id in store.ids() {
        if store.grad(id).iter().any(|g| !g.is_finite()) {
            return Err(AutodiffError::NonFiniteGradient(store.name(id).to_string()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for id in store.ids() {
        let g = store.grad(id).clone();
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        m.zip_mut_with(&g, |m, &g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
        v.zip_mut_with(&g, |v, &g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
        let value = store.value_mut(id);
        for ((p, &m), &v) in value.iter_mut().zip(m.iter()).zip(v.iter()) {
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    store.zero_grads();
    Ok(())
}
