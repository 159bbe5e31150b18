//! Adam with bias correction.

use crate::error::{DiffError, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient held a NaN or infinity; nothing changed.
    Skipped,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
    pub config: AdamConfig,
    pub skipped: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = |t: &Tensor| {
            Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).expect("shape copied")
        };
        Self {
            first_moment: params.tensors().iter().map(zeros).collect(),
            second_moment: params.tensors().iter().map(zeros).collect(),
            step_count: 0,
            config,
            skipped: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<StepOutcome> {
        if grads.len() != params.len() {
            return Err(DiffError::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.tensors().iter().zip(grads) {
            if !p.same_shape(g) {
                return Err(DiffError::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::warn!(
                "adam: non-finite gradient, update skipped ({} so far)",
                self.skipped
            );
            return Ok(StepOutcome::Skipped);
        }
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::row(v));
        p
    }

    #[test]
    fn zero_gradient_leaves_fresh_params() {
        let mut p = one_param(&[1.0, -2.0]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        s.step(&mut p, &[Tensor::row(&[0.0, 0.0])]).unwrap();
        assert_eq!(p.tensors()[0].data(), &[1.0, -2.0]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = one_param(&[0.0]);
        let cfg = AdamConfig::default();
        let mut s = AdamState::new(&p, cfg);
        s.step(&mut p, &[Tensor::row(&[1.0])]).unwrap();
        let (m, v) = (s.first_moment[0].data()[0], s.second_moment[0].data()[0]);
        s.step(&mut p, &[Tensor::row(&[0.0])]).unwrap();
        assert!((s.first_moment[0].data()[0] - cfg.beta1 * m).abs() < 1e-15);
        assert!((s.second_moment[0].data()[0] - cfg.beta2 * v).abs() < 1e-15);
    }

    #[test]
    fn first_step_is_bias_corrected() {
        // m₁ = (1−β₁)g and m̂₁ = m₁/(1−β₁¹) = g, so the first step is lr·g/(|g|+eps)
        let mut p = one_param(&[0.0]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut s = AdamState::new(&p, cfg);
        s.step(&mut p, &[Tensor::row(&[4.0])]).unwrap();
        let expected = -0.1 * 4.0 / (4.0 + cfg.eps);
        assert!((p.tensors()[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_steps_approach_lr_sign() {
        let mut p = one_param(&[0.0, 0.0]);
        let cfg = AdamConfig::default();
        let mut s = AdamState::new(&p, cfg);
        let g = Tensor::row(&[0.3, -7.0]);
        let mut prev = p.tensors()[0].data().to_vec();
        for _ in 0..2000 {
            prev = p.tensors()[0].data().to_vec();
            s.step(&mut p, &[g.clone()]).unwrap();
        }
        let now = p.tensors()[0].data();
        assert!(((now[0] - prev[0]) + cfg.lr).abs() < 1e-9 * cfg.lr.max(1.0) + 1e-12);
        assert!(((now[1] - prev[1]) - cfg.lr).abs() < 1e-9 * cfg.lr.max(1.0) + 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = one_param(&[1.0]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        let out = s.step(&mut p, &[Tensor::row(&[f64::NAN])]).unwrap();
        assert_eq!(out, StepOutcome::Skipped);
        assert_eq!(s.step_count, 0);
        assert_eq!(s.skipped, 1);
        assert_eq!(p.tensors()[0].data(), &[1.0]);
    }
}
