use ndarray::Array2;

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments for every tensor of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = store.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.dim() == p.value.dim() && v.dim() == p.value.dim())
    }
}

/// One bias-corrected Adam update using the gradients stored in `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if !state.matches(store) {
        return Err(Error::DimensionMismatch("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (p, (m, v)) in store.iter_mut().zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        ndarray::Zip::from(&mut p.value)
            .and(&p.grad)
            .and(m)
            .and(v)
            .for_each(|w, &g, m, v| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::default();
        store.add("w", array![[1.0, -2.0]]);
        let before = store.clone();
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, 0.1).unwrap();
        assert_eq!(store.iter().next().unwrap().value, before.iter().next().unwrap().value);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::default();
        let id = store.add("w", array![[0.0, 0.0, 0.0]]);
        *store.grad_mut(id) = array![[3.0, -0.5, 100.0]];
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, 0.01).unwrap();
        let w = store.value(id);
        for (got, want) in w.iter().zip([-0.01, 0.01, -0.01]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn three_steps_match_scalar_reference() {
        let mut store = ParamStore::default();
        let id = store.add("w", array![[0.5]]);
        let mut state = AdamState::new(&store);
        // Independent scalar reference.
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for k in 1..=3 {
            store.grad_mut(id).fill(1.0);
            adam_step(&mut store, &mut state, 0.1).unwrap();
            let g = 1.0;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(k));
            let vh = v / (1.0 - 0.999f64.powi(k));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((store.value(id)[[0, 0]] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_lr() {
        let mut store = ParamStore::default();
        store.add("w", array![[0.0]]);
        let mut state = AdamState::new(&store);
        assert!(adam_step(&mut store, &mut state, 0.0).is_err());
        assert!(adam_step(&mut store, &mut state, f64::NAN).is_err());
    }
}
