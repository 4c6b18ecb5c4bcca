//! First-order optimizers and the step-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub trait Optimizer<T: Scalar> {
    /// Update `params[i]` in place from `grads[i]`.
    fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()>;
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
}

fn check<T: Scalar>(params: &[&mut Tensor<T>], grads: &[Tensor<T>], state: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("parameter {i}: shape {:?}, gradient {:?}", p.shape(), g.shape())));
        }
        if let Some(s) = state.get(i) {
            if s.shape() != p.shape() {
                return Err(Error::shape(format!("parameter {i} changed shape between steps")));
            }
        }
    }
    Ok(())
}

/// SGD with optional (Nesterov) momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, nesterov: bool, weight_decay: f64) -> Self {
        Sgd { lr, momentum, nesterov, weight_decay, velocity: Vec::new() }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        check(params, grads, &self.velocity)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        let (lr, mu, wd) = (T::from_f64_lossy(self.lr), T::from_f64_lossy(self.momentum), T::from_f64_lossy(self.weight_decay));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gv + wd * *pv;
                *vv = mu * *vv + d;
                let update = if self.nesterov { d + mu * *vv } else { *vv };
                *pv = *pv - lr * update;
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Adam with bias-corrected moments and L2 weight decay folded into the
/// gradient.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        check(params, grads, &self.m)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one, wd) = (T::one(), T::from_f64_lossy(self.weight_decay));
        let step_size = T::from_f64_lossy(self.lr / c1);
        let (sqrt_c2, eps) = (T::from_f64_lossy(c2.sqrt()), T::from_f64_lossy(self.eps));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let d = gv + wd * *pv;
                *mv = b1 * *mv + (one - b1) * d;
                *vv = b2 * *vv + (one - b2) * d * d;
                *pv = *pv - step_size * *mv / (vv.sqrt() / sqrt_c2 + eps);
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// `lr(epoch) = base * gamma^(number of milestones <= epoch)`, epochs counted
/// from 0.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDecay {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl StepDecay {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_zero_gradient_is_a_no_op() {
        let mut p = Tensor::<f64>::from_fn(&[4], |i| i as f64);
        let before = p.clone();
        let mut opt = Sgd::new(0.1, 0.9, true, 0.0);
        for _ in 0..3 {
            opt.step(&mut [&mut p], &[Tensor::zeros(&[4])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m = (1-b1), v = (1-b2); corrected m/sqrt(v) = 1, so the step is lr/(1+eps').
        let mut p = Tensor::<f64>::full(&[3], 2.0);
        let mut opt = Adam::new(1e-3);
        opt.step(&mut [&mut p], &[Tensor::full(&[3], 1.0)]).unwrap();
        let expected = 2.0 - 1e-3 / (1.0 + 1e-8);
        assert!(p.data().iter().all(|&v| (v - expected).abs() < 1e-15));
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = Tensor::<f64>::full(&[2], 1.0);
        let mut opt = Sgd::new(0.5, 0.0, false, 0.0);
        opt.step(&mut [&mut p], &[Tensor::new(&[2], vec![1.0, -2.0]).unwrap()]).unwrap();
        assert_eq!(p.data(), &[0.5, 2.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        assert!(Adam::new(0.1).step(&mut [&mut p], &[Tensor::zeros(&[3])]).is_err());
    }

    #[test]
    fn step_decay_divides_by_ten() {
        let s = StepDecay { base: 0.01, milestones: vec![20, 40], gamma: 0.1 };
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(19), 0.01);
        assert!((s.lr_at(20) - 0.001).abs() < 1e-18);
        assert!((s.lr_at(39) - 0.001).abs() < 1e-18);
        assert!((s.lr_at(40) - 0.0001).abs() < 1e-18);
    }
}
