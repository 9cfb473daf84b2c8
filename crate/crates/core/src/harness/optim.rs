use serde::{Deserialize, Serialize};

use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new<'a>(cfg: AdamConfig, params: impl Iterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Vec<f64>> = params.map(|t| vec![0.0; t.numel()]).collect();
        Self {
            cfg,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
        lr: f64,
    ) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &gr), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gr;
                *vi = beta2 * *vi + (1.0 - beta2) * gr * gr;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then inverse square-root
/// decay. `step` counts from 1.
pub fn noam_lr(step: u64, warmup: u64, peak: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for t in grads {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = [Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()];
        let mut opt = Adam::new(AdamConfig::default(), p.iter());
        let g = vec![Tensor::new(vec![2], vec![0.5, -3.0]).unwrap()];
        opt.update(p.iter_mut(), &g, 0.1);
        // bias-corrected first step is lr·sign(g)
        assert!((p[0].data()[0] - 0.9).abs() < 1e-9);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-9);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = [Tensor::new(vec![1], vec![3.0]).unwrap()];
        let mut opt = Adam::new(AdamConfig::default(), p.iter());
        for _ in 0..2000 {
            let g = vec![Tensor::new(vec![1], vec![2.0 * (p[0].data()[0] - 1.0)]).unwrap()];
            opt.update(p.iter_mut(), &g, 0.01);
        }
        assert!((p[0].data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn schedule_peaks_at_warmup() {
        assert!((noam_lr(50, 100, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(noam_lr(100, 100, 2.0), 2.0);
        assert!((noam_lr(400, 100, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut small = vec![Tensor::new(vec![1], vec![0.5]).unwrap()];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.5]);
    }
}
