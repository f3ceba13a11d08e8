//! AdamW with decoupled weight decay and linear warmup.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.03,
            warmup_steps: 500,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub step: usize,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig, params: &ParamStore<F>) -> Self {
        let zeros: Vec<Vec<F>> = params
            .iter()
            .map(|p| vec![F::zero(); p.value.len()])
            .collect();
        AdamW {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Learning rate used for the next update.
    pub fn current_lr(&self) -> f64 {
        let warm = self.config.warmup_steps;
        if warm == 0 {
            self.config.lr
        } else {
            self.config.lr * ((self.step + 1) as f64 / warm as f64).min(1.0)
        }
    }

    /// Applies one update from the store's gradient shadows.
    pub fn update(&mut self, params: &mut ParamStore<F>) {
        let c = self.config;
        let lr = self.current_lr();
        self.step += 1;
        let clip = match c.grad_clip {
            Some(max) => {
                let n = params.grad_norm().f64();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (k1, k2) = (F::one() - b1, F::one() - b2);
        let step = F::of(lr / bc1);
        let rbc2 = F::of(1.0 / bc2);
        let eps = F::of(c.eps);
        let clip = F::of(clip);
        let shrink = F::of(1.0 - lr * c.weight_decay);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = p.decay;
            for i in 0..p.value.len() {
                let g = p.grad[i] * clip;
                m[i] = b1 * m[i] + k1 * g;
                v[i] = b2 * v[i] + k2 * g * g;
                if decay {
                    p.value[i] *= shrink;
                }
                p.value[i] -= step * m[i] / ((v[i] * rbc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", vec![2], vec![1.0, -2.0], true);
        s
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut s = store();
        s.get_mut("w").grad = vec![0.3, -0.1];
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.0,
                ..Default::default()
            },
            &s,
        );
        let before = s.values();
        opt.update(&mut s);
        assert_eq!(before, s.values());
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // with bias correction, the first Adam step is lr * g/|g|
        let mut s = store();
        s.get_mut("w").grad = vec![0.5, -0.25];
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            warmup_steps: 0,
            grad_clip: None,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        opt.update(&mut s);
        let w = &s.get("w").value;
        assert!(
            (w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6,
            "{w:?}"
        );
    }

    #[test]
    fn warmup_is_linear() {
        let s = store();
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 1.0,
                warmup_steps: 4,
                ..Default::default()
            },
            &s,
        );
        let mut lrs = vec![];
        for _ in 0..6 {
            lrs.push(opt.current_lr());
            opt.step += 1;
        }
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }
}
