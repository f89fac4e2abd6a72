//! Adam and plain-SGD parameter updates.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::tensor::Tensor;

use super::OptimizerKind;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state over a fixed list of parameter tensors.
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, param_sizes: &[usize]) -> Self {
        let m = param_sizes.iter().map(|&n| vec![0.0; n]).collect();
        let v = param_sizes.iter().map(|&n| vec![0.0; n]).collect();
        Optimizer { kind, m, v, step: 0 }
    }

    /// One update step at learning rate `lr`. `params` and `grads` follow
    /// the fixed parameter order used everywhere.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                self.step += 1;
                let b1t = 1.0 - ADAM_BETA1.powi(self.step as i32);
                let b2t = 1.0 - ADAM_BETA2.powi(self.step as i32);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gv;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = m[j] / b1t;
                        let v_hat = v[j] / b2t;
                        *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn sgd_applies_exact_deltas() {
        let mut p = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::new(&[2], vec![0.5, -1.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &[2]);
        opt.step(&mut [&mut p], &[&g], 0.1);
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
        assert!((p.data()[1] + 1.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction, the first Adam step is lr * g / (|g| + eps).
        let mut p = Tensor::new(&[1], vec![0.0]).unwrap();
        let g = Tensor::new(&[1], vec![0.3]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, &[1]);
        opt.step(&mut [&mut p], &[&g], 0.01);
        assert!((p.data()[0] + 0.01).abs() < 1e-6, "{}", p.data()[0]);
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        let mut p = Tensor::new(&[1], vec![5.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, &[1]);
        for _ in 0..2000 {
            let g = Tensor::new(&[1], vec![2.0 * p.data()[0]]).unwrap();
            opt.step(&mut [&mut p], &[&g], 0.05);
        }
        assert!(p.data()[0].abs() < 1e-3);
    }
}
