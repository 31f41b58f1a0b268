//! Adam, the only optimizer the toolkit needs: it drives both model
//! training and the attack loops.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam state over a fixed set of parameter tensors, addressed by index.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, param_sizes: &[usize]) -> Self {
        Adam {
            cfg,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    /// Apply one update. `params` and `grads` must line up with the sizes
    /// given at construction; a missing gradient leaves that tensor alone.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - self.cfg.beta1.powf(t);
        let bias2 = 1.0 - self.cfg.beta2.powf(t);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let Some(grad) = grad else { continue };
            debug_assert_eq!(grad.len(), m.len(), "gradient size changed");
            for ((p, &g), (mi, vi)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * g;
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *p -= self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With a constant gradient g, the first Adam step is
        // lr · g / (|g| + ε·√(1−β₂)) ≈ lr · sign(g).
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let g = Tensor::vector(vec![0.5, -3.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &[2]);
        opt.step(&mut [&mut p], &[Some(&g)]);
        assert!((p.data()[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p.data()[1] - (-2.0 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut p = Tensor::vector(vec![5.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.2), &[1]);
        for _ in 0..500 {
            let g = Tensor::vector(vec![2.0 * p.data()[0]]).unwrap();
            opt.step(&mut [&mut p], &[Some(&g)]);
        }
        assert!(p.data()[0].abs() < 1e-3, "got {}", p.data()[0]);
    }

    #[test]
    fn matches_hand_computed_two_steps() {
        // Scalar parameter x₀=1, gradients g₁=1, g₂=2, lr=0.5.
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.5);
        let mut m = 0.0;
        let mut v = 0.0;
        let mut x = 1.0f64;
        for (t, g) in [(1u32, 1.0f64), (2, 2.0)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
        }

        let mut p = Tensor::vector(vec![1.0]).unwrap();
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: lr,
                beta1: b1,
                beta2: b2,
                epsilon: eps,
            },
            &[1],
        );
        let g1 = Tensor::vector(vec![1.0]).unwrap();
        let g2 = Tensor::vector(vec![2.0]).unwrap();
        opt.step(&mut [&mut p], &[Some(&g1)]);
        opt.step(&mut [&mut p], &[Some(&g2)]);
        assert!((p.data()[0] - x).abs() < 1e-12);
    }
}
