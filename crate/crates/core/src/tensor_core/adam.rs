use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed steps.
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }
}

/// One bias-corrected Adam update of every trainable entry that has a gradient.
///
/// Frozen entries are never touched, whatever gradient is supplied for them.
pub fn adam_step(params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut AdamState) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name:?}")))?;
        if p.value.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "gradient shape {:?} does not match parameter {name:?} of shape {:?}",
                g.shape(),
                p.value.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        if !p.trainable {
            continue;
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let pd = p.value.data_mut();
        for (((pi, mi), vi), gi) in pd.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grads(pairs: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn single_scalar_step_by_hand() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(0.0), true).unwrap();
        let mut st = AdamState::new(1e-3);
        adam_step(&mut store, &grads(&[("p", Tensor::scalar(1.0))]), &mut st).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction: p = -lr / (1 + eps).
        let expect = -1e-3 / (1.0 + 1e-8);
        let got = store.get("p").unwrap().value.item().unwrap();
        assert!((got - expect).abs() < 1e-18, "{got} vs {expect}");
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[3], 0.25), true).unwrap();
        let mut st = AdamState::default();
        for _ in 0..5 {
            adam_step(&mut store, &grads(&[("w", Tensor::zeros(&[3]))]), &mut st).unwrap();
        }
        assert!(store.get("w").unwrap().value.bit_eq(&Tensor::full(&[3], 0.25)));
        assert_eq!(st.t, 5);
    }

    #[test]
    fn rejects_shape_mismatch_and_unknown_names() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2]), true).unwrap();
        let mut st = AdamState::default();
        assert!(adam_step(&mut store, &grads(&[("w", Tensor::zeros(&[3]))]), &mut st).is_err());
        assert!(adam_step(&mut store, &grads(&[("x", Tensor::zeros(&[2]))]), &mut st).is_err());
        assert_eq!(st.t, 0);
    }

    proptest! {
        #[test]
        fn frozen_entries_never_move(
            init in prop::collection::vec(-5.0f64..5.0, 4),
            g in prop::collection::vec(-10.0f64..10.0, 4),
            steps in 1usize..6,
        ) {
            let mut store = ParamStore::new();
            store.insert("frozen", Tensor::new(&[4], init.clone()).unwrap(), false).unwrap();
            store.insert("live", Tensor::new(&[4], init.clone()).unwrap(), true).unwrap();
            let before = store.get("frozen").unwrap().value.clone();
            let gt = Tensor::new(&[4], g).unwrap();
            let mut st = AdamState::default();
            for _ in 0..steps {
                adam_step(&mut store, &grads(&[("frozen", gt.clone()), ("live", gt.clone())]), &mut st).unwrap();
            }
            prop_assert!(store.get("frozen").unwrap().value.bit_eq(&before));
            prop_assert_eq!(st.t, steps as u64);
            prop_assert!(st.first_moment("frozen").is_none());
        }
    }
}
