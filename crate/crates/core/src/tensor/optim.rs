use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::new(p.value.shape().to_vec(), vec![0.0; p.value.len()]).expect("shape"))
            .collect();
        AdamState {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every trainable parameter using the
    /// gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if !p.trainable {
                continue;
            }
            let (theta, grad) = (p.value.data_mut(), p.grad.data());
            for i in 0..theta.len() {
                let g = grad[i];
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * g;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let m_hat = m.data()[i] / c1;
                let v_hat = v.data()[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(value), true);
        store
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut store = scalar_store(1.25);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut store);
        }
        assert_eq!(store.value(crate::tensor::ParamId(0)).item(), 1.25);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut store = scalar_store(0.0);
        let id = crate::tensor::ParamId(0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut previous = 0.0;
        for _ in 0..100 {
            store.zero_grad();
            store.accumulate_grad(id, &Tensor::scalar(2.0), 1.0).unwrap();
            adam.step(&mut store);
            let now = store.value(id).item();
            assert!(now < previous);
            previous = now;
        }
    }

    #[test]
    fn single_step_matches_hand_arithmetic() {
        let mut store = scalar_store(0.5);
        let id = crate::tensor::ParamId(0);
        let config = AdamConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let mut adam = AdamState::new(&store, config);
        store.accumulate_grad(id, &Tensor::scalar(1.0), 1.0).unwrap();
        adam.step(&mut store);
        // m = 0.1, v = 0.001; m̂ = 1, v̂ = 1; Δ = -0.1 * 1 / (1 + 1e-8)
        let expected = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((store.value(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = ParamStore::new();
        let id = store.add("frozen", Tensor::scalar(3.0), false);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        store.get_mut(id).grad = Tensor::scalar(1.0);
        adam.step(&mut store);
        assert_eq!(store.value(id).item(), 3.0);
    }
}
