use serde::{Deserialize, Serialize};

use super::layers::Param;

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// One update of every given parameter, then clears their gradients. Each
/// parameter keeps its own step count, so rarely selected heads get their
/// own bias correction.
pub fn adam_step<'a>(params: impl IntoIterator<Item = &'a mut Param>, lr: f64, cfg: &AdamConfig) {
    for p in params {
        p.steps += 1;
        let t = p.steps as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        for i in 0..p.value.len() {
            let g = p.grad[i] + cfg.weight_decay as f32 * p.value[i];
            p.m[i] = b1 * p.m[i] + (1.0 - b1) * g;
            p.v[i] = b2 * p.v[i] + (1.0 - b2) * g * g;
            let mhat = p.m[i] as f64 / c1;
            let vhat = p.v[i] as f64 / c2;
            p.value[i] -= (lr * mhat / (vhat.sqrt() + cfg.eps)) as f32;
        }
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias-corrected first step is lr * sign(g) for |g| >> eps
        let mut p = Param::new(vec![1.0, -2.0]);
        p.grad = vec![0.5, -3.0];
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step([&mut p], 1e-3, &cfg);
        assert!((p.value[0] - 0.999).abs() < 1e-6);
        assert!((p.value[1] + 1.999).abs() < 1e-6);
        assert_eq!(p.grad, vec![0.0, 0.0]);
        assert_eq!(p.steps, 1);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut p = Param::new(vec![1.0]);
        adam_step([&mut p], 1e-3, &AdamConfig::default());
        assert!(p.value[0] < 1.0);
    }
}
