//! AdamW, the warmup-cosine schedule and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::trainer::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    /// Pre-training values: β = (0.9, 0.95), decay 0.05.
    pub fn pretrain() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }

    /// Probe values: β = (0.9, 0.999), decay 0.1.
    pub fn probe() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!("bad AdamW hyperparameters {self:?}")))
        }
    }
}

/// First and second moments for every parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Result<Self, TrainError> {
        config.validate()?;
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }
}

/// One bias-corrected AdamW update of every trainable parameter:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`, with the decay term only
/// on parameters flagged for decay.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    opt: &mut OptimizerState<T>,
    lr: f64,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || opt.m.len() != params.len() {
        return Err(TrainError::InvalidConfig(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            opt.m.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(TrainError::InvalidConfig(format!(
                "gradient shape mismatch for {}",
                p.name
            )));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(p.name.clone()));
        }
    }
    opt.step += 1;
    let c = opt.config;
    let t = opt.step as i32;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
    let bc1 = T::lit(1.0 - c.beta1.powi(t));
    let bc2 = T::lit(1.0 - c.beta2.powi(t));
    let (lr_t, eps, wd) = (T::lit(lr), T::lit(c.eps), T::lit(c.weight_decay));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut opt.m).zip(&mut opt.v) {
        if !p.trainable {
            continue;
        }
        let decay = p.decay;
        let iter = p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((w, &gi), (mi, vi)) in iter {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            let mut update = m_hat / (v_hat.sqrt() + eps);
            if decay {
                update += wd * *w;
            }
            *w -= lr_t * update;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_iters: u64,
    pub total_iters: u64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.min_lr >= 0.0 && self.min_lr <= self.peak_lr && self.peak_lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "need 0 <= min_lr <= peak_lr, got {} and {}",
                self.min_lr, self.peak_lr
            )));
        }
        if self.warmup_iters > self.total_iters || self.total_iters == 0 {
            return Err(TrainError::InvalidConfig(format!(
                "need warmup ({}) <= total ({}) and total > 0",
                self.warmup_iters, self.total_iters
            )));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to `min_lr` at `total_iters`.
///
/// The decay is written as `peak * c + min * (1 - c)` with
/// `c = (1 + cos(pi * progress)) / 2`, so both endpoints are hit exactly.
pub fn lr_schedule(cfg: &ScheduleConfig, step: u64) -> Result<f64, TrainError> {
    cfg.validate()?;
    if step > cfg.total_iters {
        return Err(TrainError::StepOutOfRange {
            step,
            total: cfg.total_iters,
        });
    }
    if step < cfg.warmup_iters {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_iters as f64);
    }
    if cfg.total_iters == cfg.warmup_iters {
        return Ok(cfg.min_lr);
    }
    let progress = (step - cfg.warmup_iters) as f64 / (cfg.total_iters - cfg.warmup_iters) as f64;
    let c = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(cfg.peak_lr * c + cfg.min_lr * (1.0 - c))
}

/// Global L2 norm over every tensor, accumulated in `f64`.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients by `min(1, max_norm / norm)`; returns the pre-clip norm.
pub fn clip_gradients<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamKind;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(
            "w",
            Tensor::from_f64([values.len()], values).unwrap(),
            ParamKind::Weight,
        )
        .unwrap();
        s
    }

    #[test]
    fn zero_grad_without_decay_is_fixed_point() {
        let mut s = store(&[1.0, -2.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::pretrain()
        };
        let mut opt = OptimizerState::new(cfg, &s).unwrap();
        adamw_step(&mut s, &[Tensor::zeros([2])], &mut opt, 1e-2).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let (w0, g, lr, wd, eps) = (0.5, 0.3, 1e-2, 0.1, 1e-8);
        let mut s = store(&[w0]);
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps,
            weight_decay: wd,
        };
        let mut opt = OptimizerState::new(cfg, &s).unwrap();
        adamw_step(&mut s, &[Tensor::from_f64([1], &[g]).unwrap()], &mut opt, lr).unwrap();
        let expect = w0 - lr * (g / (g.abs() + eps) + wd * w0);
        assert!((s.get("w").unwrap().data()[0] - expect).abs() < 1e-15);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn frozen_params_and_no_decay_flags() {
        let mut s = store(&[1.0]);
        s.insert("n", Tensor::ones([1]), ParamKind::NormScale).unwrap();
        s.insert("f", Tensor::ones([1]), ParamKind::Weight).unwrap();
        s.param_mut("f").unwrap().trainable = false;
        let mut opt = OptimizerState::new(AdamWConfig::pretrain(), &s).unwrap();
        let grads = vec![Tensor::zeros([1]); 3];
        adamw_step(&mut s, &grads, &mut opt, 0.1).unwrap();
        assert!(s.get("w").unwrap().data()[0] < 1.0, "decayed");
        assert_eq!(s.get("n").unwrap().data()[0], 1.0);
        assert_eq!(s.get("f").unwrap().data()[0], 1.0);
    }

    #[test]
    fn non_finite_gradient_aborts_before_update() {
        let mut s = store(&[1.0]);
        let mut opt = OptimizerState::new(AdamWConfig::pretrain(), &s).unwrap();
        let err = adamw_step(&mut s, &[Tensor::from_f64([1], &[f64::NAN]).unwrap()], &mut opt, 0.1);
        assert!(matches!(err, Err(TrainError::NonFiniteGradient(_))));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = ScheduleConfig {
            peak_lr: 1e-3,
            min_lr: 1e-5,
            warmup_iters: 10,
            total_iters: 110,
        };
        assert_eq!(lr_schedule(&cfg, 0).unwrap(), 0.0);
        assert_eq!(lr_schedule(&cfg, 5).unwrap(), 5e-4);
        assert_eq!(lr_schedule(&cfg, 10).unwrap(), 1e-3);
        assert_eq!(lr_schedule(&cfg, 110).unwrap(), 1e-5);
        assert_eq!(lr_schedule(&cfg, 60).unwrap(), (1e-3 + 1e-5) / 2.0);
        assert!(lr_schedule(&cfg, 111).is_err());
        let bad = ScheduleConfig { min_lr: 1.0, ..cfg };
        assert!(lr_schedule(&bad, 0).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::<f64>::from_f64([2], &[0.3, 0.4]).unwrap()];
        assert_eq!(clip_gradients(&mut g, 1.0), 0.5);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
        let mut g = vec![
            Tensor::<f64>::from_f64([1], &[4.0]).unwrap(),
            Tensor::from_f64([1], &[0.0]).unwrap(),
        ];
        assert_eq!(clip_gradients(&mut g, 1.0), 4.0);
        assert_eq!(g[0].data(), &[1.0]);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    }
}
