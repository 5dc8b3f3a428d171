use serde::{Deserialize, Serialize};

use super::NamedParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter
/// position, so the same model must be passed on every step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: NamedParams<'_>, lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed between steps");
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        let step_size = (lr * c2.sqrt() / c1) as f32;
        let eps_hat = (eps * c2.sqrt()) as f32;
        for ((_, p), (m, v)) in params.into_iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            assert_eq!(m.len(), p.len());
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                p.value[i] -= step_size * m[i] / (v[i].sqrt() + eps_hat);
            }
        }
    }
}

/// Cosine annealing restarted every `period` epochs. Time is measured in
/// fractional epochs so the rate also decays inside an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineWarmRestarts {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub period: f64,
}

impl CosineWarmRestarts {
    pub fn new(peak_lr: f64, period: f64) -> Self {
        Self {
            peak_lr,
            min_lr: 0.0,
            period,
        }
    }

    pub fn lr_at(&self, epoch: f64) -> f64 {
        let t = epoch.rem_euclid(self.period) / self.period;
        self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn lr_at_iter(&self, epoch: usize, iter: usize, iters_per_epoch: usize) -> f64 {
        let frac = iter as f64 / iters_per_epoch.max(1) as f64;
        self.lr_at(epoch as f64 + frac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    #[test]
    fn restarts_hit_peak_and_decay_within_period() {
        let s = CosineWarmRestarts::new(1e-4, 5.0);
        for e in [0usize, 5, 10, 15, 95] {
            assert_eq!(s.lr_at(e as f64), 1e-4);
        }
        for start in [0usize, 5, 10] {
            let lrs: Vec<f64> = (start..start + 5).map(|e| s.lr_at(e as f64)).collect();
            assert!(lrs.windows(2).all(|w| w[1] < w[0]), "{lrs:?}");
        }
        assert!((s.lr_at(2.5) - 0.5e-4).abs() < 1e-18);
        assert!(s.lr_at(4.999) < 1e-8);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Param::new(vec![3], vec![1.0, -2.0, 0.5]);
        p.grad = vec![0.3, -4.0, 0.0];
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(vec![("p".into(), &mut p)], 0.1);
        // First bias-corrected update is lr * sign(g) when |g| >> eps.
        assert!((p.value[0] - 0.9).abs() < 1e-5);
        assert!((p.value[1] + 1.9).abs() < 1e-5);
        assert_eq!(p.value[2], 0.5);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Param::new(vec![2], vec![3.0, -1.5]);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            p.grad = p.value.iter().map(|x| 2.0 * x).collect();
            opt.step(vec![("p".into(), &mut p)], 0.01);
        }
        assert!(p.value.iter().all(|x| x.abs() < 1e-2), "{:?}", p.value);
    }
}
