use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub warmup_ratio: f64,
    pub schedule: LrSchedule,
    pub total_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            warmup_ratio: 0.1,
            schedule: LrSchedule::Cosine,
            total_steps: 1,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.max_grad_norm > 0.0
            && (0.0..=1.0).contains(&self.warmup_ratio)
            && self.total_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings: {self:?}")))
        }
    }

    fn warmup_steps(&self) -> u64 {
        (self.warmup_ratio * self.total_steps as f64).ceil() as u64
    }

    /// Learning rate used for the update numbered `step` (zero based).
    /// Linear warmup, then either flat or cosine decay to zero.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warmup = self.warmup_steps();
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = self.total_steps.saturating_sub(warmup).max(1) as f64;
                let progress = ((step - warmup) as f64 / span).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Scales every gradient by `max_norm / ‖g‖` when the global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut [Tensor<T>], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (i, p) in params.iter().enumerate() {
        let g = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::contract(format!("parameter {i} has no gradient")))?;
        sq += g.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for p in params.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    decay: Vec<bool>,
}

impl<T: Real> AdamW<T> {
    /// `decay[i]` selects whether weight decay applies to parameter `i`.
    pub fn new(config: AdamWConfig, params: &[Tensor<T>], decay: Vec<bool>) -> Result<Self> {
        config.validate()?;
        if decay.len() != params.len() {
            return Err(Error::dim("decay mask length differs from parameter count"));
        }
        Ok(AdamW {
            config,
            step_count: 0,
            first_moment: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            decay,
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step_count)
    }

    /// Clips gradients to the global norm limit, then applies one
    /// decoupled-weight-decay Adam update with bias correction.
    pub fn step(&mut self, params: &mut [Tensor<T>]) -> Result<StepStats> {
        if params.len() != self.first_moment.len() {
            return Err(Error::dim("parameter count changed since optimizer creation"));
        }
        let grad_norm = clip_grad_norm(params, self.config.max_grad_norm)?;
        let lr = self.current_lr();
        let t = (self.step_count + 1) as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (lr_t, eps) = (T::of(lr), T::of(c.eps));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad.take().expect("checked by clip_grad_norm");
            let decay = if self.decay[i] {
                T::one() - lr_t * T::of(c.weight_decay)
            } else {
                T::one()
            };
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let w = p.data_mut();
            for j in 0..w.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] = w[j] * decay - lr_t * mh / (vh.sqrt() + eps);
            }
            p.grad = Some(g);
        }
        self.step_count += 1;
        Ok(StepStats { lr, grad_norm })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(x: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::new(vec![1], vec![x]).unwrap().with_grad();
        t.grad = Some(vec![g]);
        t
    }

    fn flat(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            warmup_ratio: 0.0,
            schedule: LrSchedule::Constant,
            total_steps: 10,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn decay_only_update() {
        let mut ps = vec![param(1.0, 0.0)];
        let mut opt = AdamW::new(flat(1e-3, 0.1), &ps, vec![true]).unwrap();
        opt.step(&mut ps).unwrap();
        assert!((ps[0].data()[0] - 0.9999).abs() < 1e-12);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = vec![param(0.5, 1.0)];
        let mut opt = AdamW::new(flat(1e-3, 0.0), &ps, vec![true]).unwrap();
        opt.step(&mut ps).unwrap();
        assert!((0.5 - ps[0].data()[0] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn clipping_scales_to_limit() {
        let mut ps = vec![param(0.0, 6.0), param(0.0, 8.0)];
        let norm = clip_grad_norm(&mut ps, 1.0).unwrap();
        assert!((norm - 10.0).abs() < 1e-12);
        assert!((ps[0].grad.as_ref().unwrap()[0] - 0.6).abs() < 1e-12);
        assert!((ps[1].grad.as_ref().unwrap()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut ps = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
        let mut opt = AdamW::<f64>::new(flat(1e-3, 0.0), &ps, vec![true]).unwrap();
        assert!(matches!(opt.step(&mut ps), Err(Error::Contract(_))));
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = AdamWConfig {
            lr: 1.0,
            warmup_ratio: 0.1,
            schedule: LrSchedule::Cosine,
            total_steps: 100,
            ..AdamWConfig::default()
        };
        assert!((c.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(9) - 1.0).abs() < 1e-12);
        assert!(c.lr_at(50) < 1.0);
        assert!(c.lr_at(99) < 0.01);
        for s in 0..200 {
            let lr = c.lr_at(s);
            assert!((0.0..=1.0).contains(&lr));
        }
    }
}
