//! Adam with bias correction, cosine learning-rate annealing and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::network::ParamStore;

/// `lr0 · ½ · (1 + cos(π · step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let progress = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.sum_of_squares()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let factor = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.scale_inplace(factor);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64) -> Self {
        Adam { beta1, beta2, eps: 1e-8, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let (Some(g), Some(m), Some(v)) = (grads.get(name), self.m.get_mut(name), self.v.get_mut(name)) else {
                return Err(invalid(format!("optimizer has no state for parameter {name}")));
            };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 1e-4), 1e-4);
        assert!(cosine_lr(100, 100, 1e-4).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_vec([1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut grads = ParamStore::new();
        grads.insert("w", Tensor::from_vec([1, 1, 1, 3], vec![0.3, -4.0, 0.0]).unwrap());
        let mut adam = Adam::new(&params, 0.9, 0.999);
        adam.update(&mut params, &grads, 0.01).unwrap();
        let w = params.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] + 1.99).abs() < 1e-9);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::scalar(3.0));
        let mut adam = Adam::new(&params, 0.9, 0.999);
        for _ in 0..2000 {
            let x = params.get("x").unwrap().item();
            let mut grads = ParamStore::new();
            grads.insert("x", Tensor::scalar(2.0 * (x - 1.0)));
            adam.update(&mut params, &grads, 0.01).unwrap();
        }
        assert!((params.get("x").unwrap().item() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn clipping() {
        let mut grads = ParamStore::new();
        grads.insert("a", Tensor::from_vec([1, 1, 1, 2], vec![3.0, 4.0]).unwrap());
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        let g = grads.get("a").unwrap().data();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip_global_norm(&mut grads, 10.0), 1.0);
    }
}
