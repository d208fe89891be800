//! Parameter update rules: plain SGD for the controller, Adam with coupled
//! L2 weight decay for child networks, and the cosine learning-rate schedule.
//!
//! A step consumes each parameter's gradient; parameters without a gradient
//! are left untouched (so training one sampled architecture never disturbs
//! the rest of the kernel bank).

use std::collections::HashMap;

use crate::error::{KforgeError, Result};
use crate::tensor::Tensor;

/// Stochastic gradient descent, `p <- p - lr g`.
#[derive(Clone, Copy, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Sgd {
        Sgd { lr }
    }

    pub fn step(&self, params: &[Tensor]) {
        for p in params {
            if let Some(g) = p.take_grad() {
                p.with_data_mut(|data| {
                    for (v, gi) in data.iter_mut().zip(&g) {
                        *v -= self.lr * gi;
                    }
                });
            }
        }
    }
}

struct AdamBuf {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with bias correction; the L2 term is added to the gradient before
/// the moment update, matching coupled weight decay.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: HashMap<u64, AdamBuf>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: HashMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &[Tensor]) {
        for p in params {
            let Some(g) = p.take_grad() else { continue };
            let buf = self.state.entry(p.id()).or_insert_with(|| AdamBuf {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            buf.t += 1;
            let bc1 = 1.0 - self.beta1.powi(buf.t as i32);
            let bc2 = 1.0 - self.beta2.powi(buf.t as i32);
            p.with_data_mut(|data| {
                for i in 0..data.len() {
                    let grad = g[i] + self.weight_decay * data[i];
                    buf.m[i] = self.beta1 * buf.m[i] + (1.0 - self.beta1) * grad;
                    buf.v[i] = self.beta2 * buf.v[i] + (1.0 - self.beta2) * grad * grad;
                    let m_hat = buf.m[i] / bc1;
                    let v_hat = buf.v[i] / bc2;
                    data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            });
        }
    }
}

/// Cosine annealing: `lr_min + (lr_max - lr_min)(1 + cos(pi step/total))/2`.
pub fn cosine_annealing_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps < 1 || step > total_steps {
        return Err(KforgeError::Domain {
            op: "cosine_annealing_lr",
            detail: format!("step {step} outside [0, {total_steps}]"),
        });
    }
    let cos = (std::f64::consts::PI * step as f64 / total_steps as f64).cos();
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + cos))
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(params: &[Tensor], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for p in params {
        if let Some(g) = p.grad() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params {
            if p.grad().is_some() {
                p.scale_grad(s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_arithmetic() {
        let p = Tensor::param(&[1], vec![1.0]).unwrap();
        p.accumulate_grad(&[0.5]);
        Sgd::new(0.01).step(&[p.clone()]);
        assert_eq!(p.to_vec(), vec![0.995]);
        assert!(p.grad().is_none());
    }

    #[test]
    fn sgd_skips_params_without_grad() {
        let p = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        Sgd::new(0.1).step(&[p.clone()]);
        assert_eq!(p.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let p = Tensor::param(&[1], vec![0.0]).unwrap();
        p.accumulate_grad(&[1.0]);
        let mut adam = Adam::new(0.001, 0.0);
        adam.step(&[p.clone()]);
        assert!((p.to_vec()[0] + 0.001).abs() < 1e-9, "{:?}", p.to_vec());
    }

    #[test]
    fn adam_minimizes_a_parabola_monotonically_after_warmup() {
        // f(p) = p^2 from p = 1; |p| strictly decreasing after step 5.
        let p = Tensor::param(&[1], vec![1.0]).unwrap();
        let mut adam = Adam::new(0.001, 0.0);
        let mut trail = Vec::new();
        for _ in 0..100 {
            p.accumulate_grad(&[2.0 * p.item()]);
            adam.step(&[p.clone()]);
            trail.push(p.item().abs());
        }
        for w in trail[5..].windows(2) {
            assert!(w[1] < w[0], "not decreasing: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn adam_trajectory_is_deterministic() {
        let run = || {
            let p = Tensor::param(&[2], vec![0.3, -0.8]).unwrap();
            let mut adam = Adam::new(0.01, 1e-4);
            for k in 0..50 {
                p.accumulate_grad(&[(k as f64 * 0.1).sin(), (k as f64 * 0.2).cos()]);
                adam.step(&[p.clone()]);
            }
            p.to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn weight_decay_enters_through_the_gradient() {
        // With zero incoming gradient the decay term alone must move p.
        let p = Tensor::param(&[1], vec![1.0]).unwrap();
        p.accumulate_grad(&[0.0]);
        let mut adam = Adam::new(0.001, 0.1);
        adam.step(&[p.clone()]);
        assert!(p.to_vec()[0] < 1.0);
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_annealing_lr(0, 100, 0.001, 0.0).unwrap(), 0.001);
        let end = cosine_annealing_lr(100, 100, 0.001, 0.0).unwrap();
        assert!(end.abs() < 1e-18);
        let mid = cosine_annealing_lr(50, 100, 0.001, 0.0).unwrap();
        assert!((mid - 0.0005).abs() < 1e-12);
        assert!(cosine_annealing_lr(101, 100, 0.001, 0.0).is_err());
        assert!(cosine_annealing_lr(0, 0, 0.001, 0.0).is_err());
    }

    #[test]
    fn grad_clipping_rescales_to_max_norm() {
        let a = Tensor::param(&[2], vec![0.0, 0.0]).unwrap();
        let b = Tensor::param(&[1], vec![0.0]).unwrap();
        a.accumulate_grad(&[3.0, 0.0]);
        b.accumulate_grad(&[4.0]);
        let norm = clip_grad_norm(&[a.clone(), b.clone()], 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((a.grad().unwrap()[0] - 0.6).abs() < 1e-12);
        assert!((b.grad().unwrap()[0] - 0.8).abs() < 1e-12);
        // Under the threshold: untouched.
        let norm2 = clip_grad_norm(&[a.clone(), b.clone()], 10.0);
        assert!(norm2 <= 1.0 + 1e-12);
        assert!((a.grad().unwrap()[0] - 0.6).abs() < 1e-12);
    }
}
