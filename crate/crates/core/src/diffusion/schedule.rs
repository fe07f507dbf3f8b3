//! Linear variance schedule and the forward noising process.

use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_1: f64 = 1e-4;
pub const DEFAULT_BETA_T: f64 = 0.02;

/// Linear interpolation of beta over T steps.
pub fn make_schedule(
    t_steps: usize,
    beta_1: f64,
    beta_t: f64,
) -> Result<VarianceSchedule, DiffusionError> {
    if t_steps < 2 {
        return Err(DiffusionError::Schedule(format!(
            "T must be >= 2, got {t_steps}"
        )));
    }
    if !(0.0 < beta_1 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(DiffusionError::Schedule(format!(
            "need 0 < beta_1 <= beta_T < 1, got beta_1={beta_1}, beta_T={beta_t}"
        )));
    }
    let betas: Vec<f64> = (0..t_steps)
        .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (t_steps - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(VarianceSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl VarianceSchedule {
    pub fn default_schedule() -> Self {
        make_schedule(DEFAULT_T, DEFAULT_BETA_1, DEFAULT_BETA_T).expect("defaults valid")
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.len() {
            return Err(DiffusionError::Schedule(format!(
                "t={t} out of range 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    /// beta_t, 1-based.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// One forward step: z_t = sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) eps.
    pub fn forward_step(
        &self,
        z_prev: &Tensor,
        t: usize,
        eps: &Tensor,
    ) -> Result<Tensor, DiffusionError> {
        self.check_t(t)?;
        if z_prev.shape() != eps.shape() {
            return Err(DiffusionError::Shape(format!(
                "noise shape {:?} vs latent {:?}",
                eps.shape(),
                z_prev.shape()
            )));
        }
        let a = (1.0 - self.beta(t)).sqrt();
        let b = self.beta(t).sqrt();
        let data = z_prev
            .data()
            .iter()
            .zip(eps.data())
            .map(|(z, e)| a * z + b * e)
            .collect();
        Ok(Tensor::new(z_prev.shape().to_vec(), data).expect("shape preserved"))
    }

    /// Closed-form marginal: z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps.
    pub fn q_sample(&self, z_0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor, DiffusionError> {
        self.check_t(t)?;
        if z_0.shape() != eps.shape() {
            return Err(DiffusionError::Shape(format!(
                "noise shape {:?} vs latent {:?}",
                eps.shape(),
                z_0.shape()
            )));
        }
        let ab = self.alpha_bar(t);
        let a = ab.sqrt();
        let b = (1.0 - ab).sqrt();
        let data = z_0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(z, e)| a * z + b * e)
            .collect();
        Ok(Tensor::new(z_0.shape().to_vec(), data).expect("shape preserved"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn hand_computed_alpha_bar() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-12);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-12);
    }

    #[test]
    fn default_terminal_alpha_bar_is_tiny() {
        let s = VarianceSchedule::default_schedule();
        assert!(s.alpha_bar(DEFAULT_T) < 5e-5, "{}", s.alpha_bar(DEFAULT_T));
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = VarianceSchedule::default_schedule();
        for t in 2..=s.len() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
        }
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(make_schedule(1, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_step_formula() {
        let s = make_schedule(10, 0.04, 0.04).unwrap();
        let z = Tensor::from_vec(vec![1.0, -2.0]);
        // eps = 0: pure contraction
        let zt = s.forward_step(&z, 3, &Tensor::zeros(&[2])).unwrap();
        let c = (1.0f64 - 0.04).sqrt();
        assert!((zt.data()[0] - c).abs() < 1e-12);
        assert!((zt.data()[1] + 2.0 * c).abs() < 1e-12);
        // z = 0, eps = 1: sqrt(beta)
        let zt = s
            .forward_step(&Tensor::zeros(&[2]), 3, &Tensor::full(&[2], 1.0))
            .unwrap();
        assert!(zt.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn q_sample_noiseless_is_exact() {
        let s = VarianceSchedule::default_schedule();
        let z0 = Tensor::from_vec(vec![0.5, -1.5, 2.0]);
        for t in [1, 500, 1000] {
            let zt = s.q_sample(&z0, t, &Tensor::zeros(&[3])).unwrap();
            let a = s.alpha_bar(t).sqrt();
            for (got, want) in zt.data().iter().zip(z0.data()) {
                assert_eq!(*got, a * want);
            }
        }
    }

    #[test]
    fn t_out_of_range_rejected() {
        let s = make_schedule(10, 0.01, 0.02).unwrap();
        let z = Tensor::zeros(&[2]);
        assert!(s.forward_step(&z, 0, &z).is_err());
        assert!(s.forward_step(&z, 11, &z).is_err());
        assert!(s.q_sample(&z, 0, &z).is_err());
    }

    /// Iterating the stepwise forward process matches the closed-form
    /// marginal in distribution (Monte Carlo over many draws).
    #[test]
    fn stepwise_matches_closed_form_moments() {
        let t_steps = 50;
        let s = make_schedule(t_steps, 1e-3, 0.1).unwrap();
        let z0 = 0.8;
        let trials = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &t in &[1usize, t_steps / 2, t_steps] {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..trials {
                let mut z = Tensor::scalar(z0);
                for step in 1..=t {
                    let e: f64 = rng.sample(StandardNormal);
                    z = s.forward_step(&z, step, &Tensor::scalar(e)).unwrap();
                }
                let v = z.item();
                sum += v;
                sumsq += v * v;
            }
            let mean = sum / trials as f64;
            let var = sumsq / trials as f64 - mean * mean;
            let want_mean = s.alpha_bar(t).sqrt() * z0;
            let want_var = 1.0 - s.alpha_bar(t);
            // 3 standard errors
            let se_mean = (want_var.max(1e-12) / trials as f64).sqrt();
            let se_var = want_var.max(1e-12) * (2.0 / trials as f64).sqrt();
            assert!(
                (mean - want_mean).abs() <= 3.0 * se_mean.max(1e-6),
                "t={t}: mean {mean} vs {want_mean}"
            );
            assert!(
                (var - want_var).abs() <= 3.0 * se_var.max(1e-6),
                "t={t}: var {var} vs {want_var}"
            );
        }
    }

    /// At t=T under the default schedule z_T decorrelates from z_0.
    #[test]
    fn terminal_sample_decorrelates() {
        let s = VarianceSchedule::default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1000;
        let mut z0s = Vec::with_capacity(n);
        let mut zts = Vec::with_capacity(n);
        for _ in 0..n {
            let z0: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            let zt = s
                .q_sample(&Tensor::scalar(z0), s.len(), &Tensor::scalar(e))
                .unwrap();
            z0s.push(z0);
            zts.push(zt.item());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (m0, mt) = (mean(&z0s), mean(&zts));
        let mut cov = 0.0;
        let mut v0 = 0.0;
        let mut vt = 0.0;
        for i in 0..n {
            cov += (z0s[i] - m0) * (zts[i] - mt);
            v0 += (z0s[i] - m0).powi(2);
            vt += (zts[i] - mt).powi(2);
        }
        let corr = cov / (v0.sqrt() * vt.sqrt());
        assert!(corr.abs() < 0.05, "corr {corr}");
    }

    /// Variance of z_t - sqrt(abar_t) z_0 matches 1 - abar_t within 5%.
    #[test]
    fn q_sample_noise_variance() {
        let s = VarianceSchedule::default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = 400;
        let n = 20_000;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            let zt = s
                .q_sample(&Tensor::scalar(1.3), t, &Tensor::scalar(e))
                .unwrap();
            let resid = zt.item() - s.alpha_bar(t).sqrt() * 1.3;
            sumsq += resid * resid;
        }
        let var = sumsq / n as f64;
        let want = 1.0 - s.alpha_bar(t);
        assert!((var - want).abs() / want < 0.05, "var {var} vs {want}");
    }
}
