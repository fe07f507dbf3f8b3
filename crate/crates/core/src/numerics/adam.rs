//! Bias-corrected adaptive-moment optimizer.

use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamSet};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay applied directly to the parameters
    /// (AdamW-style), not mixed into the gradient moments.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    first_moment: ParamSet,
    second_moment: ParamSet,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Self {
            config,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter; gradient names/shapes must match.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<(), NumericsError> {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| {
                NumericsError::BadShape(format!("missing gradient for parameter {name}"))
            })?;
            if g.shape() != p.shape() {
                return Err(NumericsError::BadShape(format!(
                    "gradient for {name}: shape {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.first_moment.get_mut(name).expect("moment tracked");
            for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
            }
            let v = self.second_moment.get_mut(name).expect("moment tracked");
            for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
            }
            let m = self.first_moment.get(name).unwrap();
            let v = self.second_moment.get(name).unwrap();
            for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let m_hat = mv / bc1;
                let v_hat = vv / bc2;
                *pv -= c.learning_rate
                    * (m_hat / (v_hat.sqrt() + c.epsilon) + c.weight_decay * *pv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let grads = params.zeros_like();
        let mut opt = AdamState::new(AdamConfig::default(), &params);
        let before = params.clone();
        for _ in 0..10 {
            opt.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(opt.step_count(), 10);
    }

    #[test]
    fn step_counter_increments_once_per_call() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(0.0));
        let grads = params.zeros_like();
        let mut opt = AdamState::new(AdamConfig::default(), &params);
        for i in 1..=5 {
            opt.step(&mut params, &grads).unwrap();
            assert_eq!(opt.step_count(), i);
        }
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // f(w) = (w - 3)^2, gradient 2(w - 3)
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(0.0));
        let mut opt = AdamState::new(
            AdamConfig {
                learning_rate: 0.1,
                ..AdamConfig::default()
            },
            &params,
        );
        for _ in 0..200 {
            let w = params.get("w").unwrap().item();
            let mut grads = ParamSet::new();
            grads.insert("w", Tensor::scalar(2.0 * (w - 3.0)));
            opt.step(&mut params, &grads).unwrap();
        }
        let w = params.get("w").unwrap().item();
        assert!((w - 3.0).abs() < 0.05, "w = {w}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::from_vec(vec![0.0, 0.0]));
        let mut grads = ParamSet::new();
        grads.insert("w", Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let mut opt = AdamState::new(AdamConfig::default(), &params);
        assert!(opt.step(&mut params, &grads).is_err());
    }
}
