use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, beta1: default_beta1(), beta2: default_beta2(), epsilon: default_epsilon() }
    }
}

/// First and second moments shaped like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParameterSet, config: AdamConfig) -> Self {
        let zeros = |p: &ParameterSet| p.ids().map(|id| Tensor::zeros(p.value(id).shape())).collect::<Vec<_>>();
        AdamState { config, step: 0, first: zeros(params), second: zeros(params) }
    }

    /// One bias-corrected update of every trainable parameter. Frozen
    /// parameters and their moments are left untouched.
    pub fn step(&mut self, params: &mut ParameterSet) {
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if params.is_frozen(id) {
                continue;
            }
            let g = params.grad(id).data().to_vec();
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let w = params.value_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                w[j] -= learning_rate * mh / (vh.sqrt() + epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = ParameterSet::new();
        p.add("w", Tensor::from_matrix(1, 3, vec![1.0, -2.0, 0.5]));
        let before = p.value_bytes();
        let mut adam = AdamState::new(&p, AdamConfig::with_lr(0.1));
        for _ in 0..10 {
            adam.step(&mut p);
        }
        assert_eq!(p.value_bytes(), before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² after one step, so the update is lr·g/(|g|+ε).
        let mut p = ParameterSet::new();
        let id = p.add("w", Tensor::zeros(&[1]));
        p.grad_mut(id).data_mut()[0] = 1.0;
        let mut adam = AdamState::new(&p, AdamConfig::with_lr(0.1));
        adam.step(&mut p);
        let want = -0.1 / (1.0 + 1e-8);
        assert!((p.value(id).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = [3.0, -1.5, 0.25, 2.0];
        let mut p = ParameterSet::new();
        let id = p.add("w", Tensor::zeros(&[4]));
        let mut adam = AdamState::new(&p, AdamConfig::with_lr(0.05));
        let loss = |w: &[f64]| w.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut history = Vec::new();
        for _ in 0..500 {
            let w = p.value(id).data().to_vec();
            history.push(loss(&w));
            for (g, (a, b)) in p.grad_mut(id).data_mut().iter_mut().zip(w.iter().zip(&target)) {
                *g = 2.0 * (a - b);
            }
            adam.step(&mut p);
        }
        let final_loss = loss(p.value(id).data());
        assert!(final_loss < 1e-6, "final loss {final_loss}");
        assert!(history[0] > history[50] && history[50] > history[100]);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut p = ParameterSet::new();
        let a = p.add("a", Tensor::zeros(&[2]));
        let b = p.add("b", Tensor::zeros(&[2]));
        p.set_frozen(a, true);
        p.grad_mut(a).fill(1.0);
        p.grad_mut(b).fill(1.0);
        let mut adam = AdamState::new(&p, AdamConfig::with_lr(0.1));
        adam.step(&mut p);
        assert_eq!(p.value(a).data(), &[0.0, 0.0]);
        assert!(p.value(b).data().iter().all(|v| *v < 0.0));
    }
}
