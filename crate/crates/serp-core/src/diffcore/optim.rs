//! AdamW with decoupled weight decay, plus the cosine learning-rate schedule.

use crate::diffcore::params::ParamSet;
use crate::diffcore::real::Real;
use crate::error::{Error, Result};

/// Hyperparameters. β1/β2/eps defaults are the standard Adam values;
/// weight decay defaults to 0.05.
#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Per-parameter first/second moment buffers plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamW<R: Real = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    /// First/second moments, one buffer per parameter slot.
    pub m: Vec<Vec<R>>,
    pub v: Vec<Vec<R>>,
}

impl<R: Real> AdamW<R> {
    pub fn new(params: &ParamSet<R>, config: AdamWConfig) -> Self {
        let m = params.iter().map(|p| vec![R::ZERO; p.value.numel()]).collect();
        let v = params.iter().map(|p| vec![R::ZERO; p.value.numel()]).collect();
        AdamW {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// One decoupled-weight-decay Adam update at learning rate `lr`.
    ///
    /// `grads[slot]` must hold a full gradient buffer for every trainable
    /// parameter (as produced by `Graph::accumulate_param_grads`); an empty
    /// buffer on a trainable slot is a state error.
    pub fn step(&mut self, params: &mut ParamSet<R>, grads: &[Vec<R>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::State(format!(
                "gradient store has {} slots, model has {}",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.config.beta1.powi(t);
        let bc2 = 1.0 - self.config.beta2.powi(t);
        let b1 = R::from_f64(self.config.beta1);
        let b2 = R::from_f64(self.config.beta2);
        let one_m_b1 = R::from_f64(1.0 - self.config.beta1);
        let one_m_b2 = R::from_f64(1.0 - self.config.beta2);
        let eps = R::from_f64(self.config.eps);
        let step_scale = R::from_f64(lr / bc1);
        let inv_sqrt_bc2 = R::from_f64(1.0 / bc2.sqrt());
        let decay = R::from_f64(lr * self.config.weight_decay);

        for slot in 0..params.len() {
            let param = params.get_mut(slot);
            if !param.trainable {
                continue;
            }
            let g = &grads[slot];
            if g.is_empty() {
                return Err(Error::State(format!(
                    "missing gradient for trainable parameter {}",
                    param.name
                )));
            }
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for (i, p) in param.value.data_mut().iter_mut().enumerate() {
                let gi = g[i];
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                let vhat_sqrt = (v[i]).sqrt() * inv_sqrt_bc2;
                *p -= step_scale * m[i] / (vhat_sqrt + eps);
                *p -= decay * *p;
            }
        }
        Ok(())
    }
}

/// Cosine annealing: lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total)).
/// Steps past `total_steps` clamp to `lr_min`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return lr_min;
    }
    let frac = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tensor::Tensor;

    fn single_param(v: f32) -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        ps.register("p", Tensor::new(vec![1], vec![v]));
        ps
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut ps = single_param(3.5);
        let mut opt = AdamW::new(
            &ps,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        opt.step(&mut ps, &[vec![0.0]], 1e-3).unwrap();
        assert_eq!(ps.get(0).value.data(), &[3.5]);
    }

    #[test]
    fn lr_zero_is_identity_even_with_decay() {
        let mut ps = single_param(3.5);
        let mut opt = AdamW::new(&ps, AdamWConfig::default());
        opt.step(&mut ps, &[vec![1.0]], 0.0).unwrap();
        assert_eq!(ps.get(0).value.data(), &[3.5]);
    }

    #[test]
    fn first_step_is_signed_lr() {
        // bias correction makes the t=1 update lr·sign(g) up to eps
        let mut ps = single_param(0.0);
        let mut opt = AdamW::new(
            &ps,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        opt.step(&mut ps, &[vec![1.0]], 1e-3).unwrap();
        let p = ps.get(0).value.data()[0];
        assert!((p - (-1e-3)).abs() < 1e-8, "p = {p}");
    }

    #[test]
    fn quadratic_descends() {
        // loss = ½p², grad = p, start at 2
        let mut ps = single_param(2.0);
        let mut opt = AdamW::new(
            &ps,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        let mut losses = Vec::new();
        for _ in 0..100 {
            let p = ps.get(0).value.data()[0];
            losses.push(0.5 * p * p);
            opt.step(&mut ps, &[vec![p]], 0.01).unwrap();
        }
        for w in losses[5..].windows(2) {
            assert!(w[1] < w[0], "loss not strictly decreasing: {w:?}");
        }
    }

    #[test]
    fn missing_grad_is_state_error() {
        let mut ps = single_param(1.0);
        let mut opt = AdamW::new(&ps, AdamWConfig::default());
        assert!(matches!(
            opt.step(&mut ps, &[Vec::new()], 1e-3),
            Err(crate::error::Error::State(_))
        ));
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-6), 1e-3);
        assert_eq!(cosine_lr(100, 100, 1e-3, 1e-6), 1e-6);
        assert_eq!(cosine_lr(150, 100, 1e-3, 1e-6), 1e-6);
        let mid = cosine_lr(50, 100, 1e-3, 1e-6);
        assert!((mid - (1e-3 + 1e-6) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_monotone_nonincreasing() {
        let mut prev = f64::INFINITY;
        for s in 0..=500 {
            let lr = cosine_lr(s, 500, 1e-2, 1e-5);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }
}
