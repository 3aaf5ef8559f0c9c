//! Adam with per-tensor moment state keyed by parameter name.

use std::collections::HashMap;

use crate::model::ToyModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: HashMap::new(),
        }
    }

    /// Applies one update. `grads` follows `model.named_params_mut()` order.
    /// Tensors whose size changed since the last step restart from zero moments.
    pub fn step(&mut self, model: &mut ToyModel, grads: &[Vec<f64>]) {
        let c = self.config;
        for ((name, params), grad) in model.named_params_mut().into_iter().zip(grads) {
            debug_assert_eq!(params.len(), grad.len(), "{name}");
            let st = self.state.entry(name).or_insert_with(|| Moments {
                m: Vec::new(),
                v: Vec::new(),
                step: 0,
            });
            if st.m.len() != params.len() {
                *st = Moments {
                    m: vec![0.0; params.len()],
                    v: vec![0.0; params.len()],
                    step: 0,
                };
            }
            st.step += 1;
            let bc1 = 1.0 - c.beta1.powi(st.step);
            let bc2 = 1.0 - c.beta2.powi(st.step);
            for i in 0..params.len() {
                let g = grad[i];
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                params[i] -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }

    /// Keeps the moments at `positions` of tensor `name` (after pruning).
    pub fn retain(&mut self, name: &str, positions: &[usize]) {
        if let Some(st) = self.state.get_mut(name) {
            if positions.iter().all(|&p| p < st.m.len()) {
                st.m = positions.iter().map(|&p| st.m[p]).collect();
                st.v = positions.iter().map(|&p| st.v[p]).collect();
            }
        }
    }

    /// Drops all state.
    pub fn reset(&mut self) {
        self.state.clear();
    }
}
