use serde::{Deserialize, Serialize};

use crate::error::{CrnError, Result};

/// Adam hyperparameters. Defaults are the published ones; the training
/// config can override the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Optimizer state over one flat parameter vector (first/second moments
/// plus the step counter).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(param_len: usize, config: AdamConfig) -> Self {
        AdamState { config, step: 0, m: vec![0.0; param_len], v: vec![0.0; param_len] }
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(CrnError::Dimension(format!(
                "adam: params {} grads {} state {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut state = AdamState::new(3, AdamConfig::default());
        let mut params = vec![0.3, -1.2, 7.0];
        let before = params.clone();
        state.step(&mut params, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    // Hand evaluation of the update rule for a single scalar. With any
    // constant gradient g != 0 the bias-corrected first step has magnitude
    // lr * g / (|g| + eps), i.e. almost exactly the learning rate.
    fn hand_adam(g: f64, steps: usize, c: AdamConfig) -> Vec<f64> {
        let (mut m, mut v, mut p) = (0.0, 0.0, 0.0);
        let mut deltas = Vec::new();
        for t in 1..=steps {
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let m_hat = m / (1.0 - c.beta1.powi(t as i32));
            let v_hat = v / (1.0 - c.beta2.powi(t as i32));
            let delta = c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            p -= delta;
            deltas.push(delta);
        }
        let _ = p;
        deltas
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(1, cfg);
        let mut params = vec![0.0];
        state.step(&mut params, &[0.5]).unwrap();
        let expected = hand_adam(0.5, 1, cfg)[0];
        assert_eq!(params[0], -expected);
        assert!((expected - cfg.learning_rate).abs() < 1e-8 * cfg.learning_rate.abs() + 1e-10);
    }

    #[test]
    fn two_identical_gradients_match_hand_evaluation() {
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(1, cfg);
        let mut params = vec![0.0];
        state.step(&mut params, &[0.7]).unwrap();
        let after_first = params[0];
        state.step(&mut params, &[0.7]).unwrap();
        let deltas = hand_adam(0.7, 2, cfg);
        assert!((after_first + deltas[0]).abs() < 1e-18);
        assert!((params[0] + deltas[0] + deltas[1]).abs() < 1e-18);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut state = AdamState::new(2, AdamConfig::default());
        let mut params = vec![0.0, 0.0];
        assert!(state.step(&mut params, &[1.0]).is_err());
        let mut short = vec![0.0];
        assert!(state.step(&mut short, &[1.0, 2.0]).is_err());
    }
}
