//! Adam optimiser with bias correction.

use crate::unet::NamedParam;
use crate::{NnError, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[NamedParam]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients must be aligned with `params`.
    ///
    /// Non-finite gradients abort the step before any parameter changes.
    pub fn step(&mut self, params: &mut [NamedParam], grads: &[Tensor]) -> Result<(), NnError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(NnError::Shape(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(NnError::Shape(format!(
                    "adam: gradient shape {:?} for parameter {} {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            if g.has_non_finite() {
                return Err(NnError::NonFinite(format!(
                    "gradient of {} at step {} contains NaN or infinity",
                    p.name,
                    self.step + 1
                )));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let values = p.value.data_mut();
            for (((x, &gi), mi), vi) in values
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Vec<NamedParam> {
        vec![NamedParam {
            name: "p".into(),
            value: Tensor::new(vec![1], vec![v]).unwrap(),
        }]
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = one_param(1.5);
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        adam.step(&mut params, &[Tensor::zeros(&[1])]).unwrap();
        assert_eq!(params[0].value.data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.2, 1e-3] {
            let mut params = one_param(0.0);
            let mut adam = AdamState::new(AdamConfig::default(), &params);
            adam.step(&mut params, &[Tensor::new(vec![1], vec![g]).unwrap()]).unwrap();
            // m_hat = g, v_hat = g^2: step = lr * g / (|g| + eps)
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((params[0].value.data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn second_step_matches_moment_recursion() {
        let cfg = AdamConfig::default();
        let g = 0.37;
        let mut params = one_param(0.0);
        let mut adam = AdamState::new(cfg.clone(), &params);
        let grad = [Tensor::new(vec![1], vec![g]).unwrap()];
        adam.step(&mut params, &grad).unwrap();
        let after_one = params[0].value.data()[0];
        adam.step(&mut params, &grad).unwrap();
        let second = params[0].value.data()[0] - after_one;

        let m2 = (1.0 - cfg.beta1) * g * (1.0 + cfg.beta1);
        let v2 = (1.0 - cfg.beta2) * g * g * (1.0 + cfg.beta2);
        let m_hat = m2 / (1.0 - cfg.beta1 * cfg.beta1);
        let v_hat = v2 / (1.0 - cfg.beta2 * cfg.beta2);
        let expected = -cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        assert!((second - expected).abs() < 1e-10);
    }

    #[test]
    fn nan_gradient_is_rejected_without_update() {
        let mut params = one_param(2.0);
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        let err = adam
            .step(&mut params, &[Tensor::new(vec![1], vec![f64::NAN]).unwrap()])
            .unwrap_err();
        assert!(matches!(err, NnError::NonFinite(_)));
        assert_eq!(params[0].value.data()[0], 2.0);
        assert_eq!(adam.step_count(), 0);
    }
}
