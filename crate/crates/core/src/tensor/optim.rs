//! Parameter update rules.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub trait Optimizer<T: Scalar> {
    /// Applies one update in place. `params` and `grads` are matched by
    /// position.
    fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()>;
}

fn check_shapes<T: Scalar>(params: &[Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "optimizer_step",
            format!("{} params but {} grads", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "optimizer_step",
                format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    Ok(())
}

/// Plain gradient descent: `p <- p - lr * g`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl<T: Scalar> Optimizer<T> for Sgd {
    fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        check_shapes(params, grads)?;
        let lr = T::lit(self.lr);
        for (p, g) in params.iter_mut().zip(grads) {
            *p = p.zip_map(g, |pv, gv| pv - lr * gv)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
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

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        check_shapes(params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::shape("optimizer_step", "optimizer state does not match params"));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let gd = g.data();
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * gd[i];
                v[i] = b2 * v[i] + (T::one() - b2) * gd[i] * gd[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            *p = Tensor::new(p.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = vec![Tensor::scalar(1.0f64)];
        Sgd { lr: 0.1 }.step(&mut p, &[Tensor::scalar(0.5)]).unwrap();
        assert!((p[0].item() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let orig = Tensor::from_fn(vec![3], |i| i as f32 - 1.0);
        let mut p = vec![orig.clone()];
        Sgd { lr: 0.1 }.step(&mut p, &[Tensor::zeros(vec![3])]).unwrap();
        assert_eq!(p[0], orig);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut p, &[Tensor::zeros(vec![3])]).unwrap();
        assert_eq!(p[0], orig);
    }

    #[test]
    fn adam_single_step_matches_recurrence() {
        // hand-executed: m = 0.1, v = 0.001, mhat = 1, vhat = 1,
        // p = 0 - 1e-4 * 1 / (1 + 1e-8)
        let mut p = vec![Tensor::scalar(0.0f64)];
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let m = 0.1f64;
        let v = 0.001f64;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.999);
        let expected = -1e-4 * mhat / (vhat.sqrt() + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-18, "{} vs {expected}", p[0].item());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::<f64>::zeros(vec![2])];
        assert!(Sgd { lr: 0.1 }.step(&mut p, &[Tensor::zeros(vec![3])]).is_err());
        assert!(Sgd { lr: 0.1 }.step(&mut p, &[]).is_err());
    }
}
