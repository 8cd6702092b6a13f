use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Tensor;

/// Learning rate decaying from `base` to zero along a half cosine.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base: f64, total_steps: usize) -> Self {
        CosineSchedule { base, total_steps }
    }

    /// Rate at `step`; equals `base` at 0 and 0 at `total_steps`.
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base;
        }
        let frac = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        0.5 * self.base * (1.0 + (PI * frac).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: usize,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamConfig) -> Self {
        let (first, second): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Adam {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// Applies one update with rate `lr`. `params` and `grads` must line up
    /// with the tensors the optimizer was built from.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), self.first.len(), "parameter count changed");
        assert_eq!(grads.len(), self.first.len(), "gradient count mismatch");
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
            }
            let v = self.second[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
            }
            let m = self.first[i].data();
            let v = self.second[i].data();
            for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                *pj -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_monotone() {
        let s = CosineSchedule::new(0.01, 37);
        assert_eq!(s.lr(0), 0.01);
        assert!(s.lr(37).abs() < 1e-18);
        for t in 0..37 {
            assert!(s.lr(t + 1) <= s.lr(t));
        }
    }

    #[test]
    fn first_adam_step_matches_closed_form() {
        // With zero-initialized moments and bias correction, the first update
        // is lr * g / (|g| + eps).
        let mut p = Tensor::scalar(1.5);
        let g = Tensor::scalar(-0.25);
        let mut adam = Adam::new([&p], AdamConfig::default());
        adam.update(&mut [&mut p], &[g], 0.1);
        let expected = 1.5 + 0.1 * 0.25 / (0.25 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn moments_share_parameter_shapes() {
        let a = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[7]);
        let adam = Adam::new([&a, &b], AdamConfig::default());
        let (m, v) = adam.moments();
        assert_eq!(m[0].shape(), a.shape());
        assert_eq!(v[1].shape(), b.shape());
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0]).unwrap()];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g[0].norm_sq().sqrt() - 1.0).abs() < 1e-15);
    }
}
