//! AdamW and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::nn::Module;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.max_steps);
        if step < self.warmup_steps {
            let f = step as f64 / self.warmup_steps as f64;
            return self.lr_start * (1.0 - f) + self.lr_peak * f;
        }
        let span = self.max_steps - self.warmup_steps;
        if span == 0 {
            return self.lr_peak;
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        self.lr_min + (self.lr_peak - self.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Optimizer state is matched to parameters by visiting order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update using the gradients accumulated on `module`'s
    /// trainable tensors, replacing each with a fresh leaf. Tensors that do
    /// not require grad are left alone. Weight decay skips vectors (biases,
    /// norm gains).
    pub fn step(&mut self, module: &mut dyn Module, lr: f64) {
        self.t += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut i = 0;
        module.visit_mut("", &mut |_, p| {
            if !p.requires_grad() {
                return;
            }
            if m_all.len() <= i {
                m_all.push(vec![0.0; p.numel()]);
                v_all.push(vec![0.0; p.numel()]);
            }
            let (m, v) = (&mut m_all[i], &mut v_all[i]);
            i += 1;
            let Some(g) = p.grad() else { return };
            let decay = if p.shape().len() >= 2 { weight_decay } else { 0.0 };
            let mut data = p.data().to_vec();
            for j in 0..data.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                data[j] -= lr * (update + decay * data[j]);
            }
            *p = Tensor::param(p.shape(), data).expect("same shape");
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn schedule() -> LrSchedule {
        LrSchedule { lr_start: 1e-8, lr_peak: 1e-5, lr_min: 0.0, warmup_steps: 1000, max_steps: 60_000 }
    }

    #[test]
    fn anchors_are_exact() {
        let s = schedule();
        assert_eq!(s.lr_at(0), 1e-8);
        assert_eq!(s.lr_at(1000), 1e-5);
        assert_eq!(s.lr_at(60_000), 0.0);
    }

    proptest! {
        #[test]
        fn schedule_rises_then_falls(step in 0usize..60_000) {
            let s = schedule();
            let (a, b) = (s.lr_at(step), s.lr_at(step + 1));
            if step < s.warmup_steps {
                prop_assert!(b >= a);
            } else {
                prop_assert!(b <= a);
            }
            prop_assert!((a - b).abs() < 2e-8);
        }
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut rng = SplitMix64::new(5);
        let mut lin = Linear::init(3, 2, &mut rng);
        let before = lin.weight.data().to_vec();
        let x = Tensor::new(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        lin.forward(&x).unwrap().sum().backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut lin, 0.0);
        assert_eq!(lin.weight.data(), &before[..]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // Bias-corrected first step is lr * g / (|g| + eps).
        let mut p = Linear {
            weight: Tensor::param(&[1, 1], vec![2.0]).unwrap(),
            bias: Tensor::param(&[1], vec![0.0]).unwrap(),
        };
        let x = Tensor::new(&[1, 1], vec![3.0]).unwrap();
        p.forward(&x).unwrap().sum().backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.1, ..Default::default() });
        opt.step(&mut p, 0.01);
        let expected = 2.0 - 0.01 * (3.0 / (3.0 + 1e-8) + 0.1 * 2.0);
        assert!((p.weight.data()[0] - expected).abs() < 1e-15);
        let expected_bias = -0.01 * (1.0 / (1.0 + 1e-8));
        assert!((p.bias.data()[0] - expected_bias).abs() < 1e-15);
    }
}
