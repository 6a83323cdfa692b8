use serde::{Deserialize, Serialize};

use super::layers::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for one ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    /// Multiplies the learning rate by `factor`.
    pub fn decay_lr(&mut self, factor: f64) {
        self.config.lr *= factor;
    }

    /// One update using the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                p.value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Param::new("w", vec![3], vec![0.0, 1.0, -2.0]);
        p.grad = vec![0.3, -5.0, 1e-3];
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut [&mut p]);
        let expect = [-1e-3, 1.0 + 1e-3, -2.0 - 1e-3];
        for (a, b) in p.value.iter().zip(expect) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn decay_schedule() {
        let mut opt = Adam::new(AdamConfig::default());
        opt.decay_lr(0.65);
        assert!((opt.lr() - 0.00065).abs() < 1e-15);
        opt.decay_lr(0.65);
        assert!((opt.lr() - 0.0004225).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new("w", vec![2], vec![3.0, -4.0]);
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() });
        for _ in 0..2000 {
            p.grad = p.value.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut [&mut p]);
        }
        assert!(p.sq_norm() < 1e-4);
    }
}
