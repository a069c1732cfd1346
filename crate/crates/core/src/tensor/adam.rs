use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for a fixed, ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (first_moment, second_moment) = params
            .into_iter()
            .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
            .unzip();
        AdamState {
            config,
            first_moment,
            second_moment,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One bias-corrected Adam update of every parameter whose `mask` entry
    /// is set. Gradients are left in place; the caller zeroes them.
    pub fn step(&mut self, params: &mut [&mut Tensor], mask: &[bool]) -> Result<()> {
        if params.len() != self.first_moment.len() || mask.len() != params.len() {
            return Err(Error::contract(format!(
                "adam state tracks {} parameters, got {} (mask {})",
                self.first_moment.len(),
                params.len(),
                mask.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if !mask[i] {
                continue;
            }
            if p.grad().is_none() {
                return Err(Error::contract(format!("parameter {i} has no gradient")));
            }
            if p.numel() != self.first_moment[i].len() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: vec![self.first_moment[i].len()],
                });
            }
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if !mask[i] {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (j, w) in p.data.iter_mut().enumerate() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::scalar(0.5);
        p.accumulate_grad(&[1.0]).unwrap();
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(cfg, [&p]);
        state.step(&mut [&mut p], &[true]).unwrap();
        // m_hat = 1, v_hat = 1 on the first step
        let expected = 0.5 - cfg.learning_rate / (1.0 + cfg.epsilon);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(state.step_count(), 1);
        assert_eq!(p.grad(), Some(&[1.0][..]));
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 3.5]).unwrap();
        p.accumulate_grad(&[0.0; 3]).unwrap();
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        for _ in 0..5 {
            state.step(&mut [&mut p], &[true]).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut p = Tensor::scalar(1.0);
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        let err = state.step(&mut [&mut p], &[true]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        // masked-out parameters need no gradient
        state.step(&mut [&mut p], &[false]).unwrap();
    }
}
