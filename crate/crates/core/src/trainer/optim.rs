//! SGD with momentum, weight decay, learning-rate schedules and the
//! adaptive local learning rate for adder filters.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::block::{ParamKind, ParamMut};
use crate::error::{Error, Result};

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("cosine schedule needs total_steps >= 1".into()));
    }
    if step > total {
        return Err(Error::Config(format!("step {step} exceeds total {total}")));
    }
    let t = step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Cosine { total_steps: usize, lr_min: f64 },
    /// Multiplies the rate by `gamma` at each milestone.
    Step { milestones: Vec<usize>, gamma: f64 },
}

impl Schedule {
    pub fn lr(&self, base_lr: f64, step: usize) -> Result<f64> {
        match self {
            Schedule::Cosine { total_steps, lr_min } => {
                cosine_lr(step.min(*total_steps), *total_steps, base_lr, *lr_min)
            }
            Schedule::Step { milestones, gamma } => {
                let k = milestones.iter().filter(|&&m| step >= m).count();
                Ok(base_lr * gamma.powi(k as i32))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// `Some(η)` rescales adder weight gradients to norm `η·√k`.
    pub adaptive_eta: Option<f64>,
}

impl OptimConfig {
    pub const DEFAULT_ETA: f64 = 0.1;

    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: Schedule::Cosine {
                total_steps,
                lr_min: 0.0,
            },
            adaptive_eta: Some(Self::DEFAULT_ETA),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must be in [0, 1), weight_decay >= 0".into()));
        }
        if let Schedule::Cosine { total_steps: 0, .. } = self.schedule {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if let Some(eta) = self.adaptive_eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::Config("adaptive eta must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Rescales `g` to norm `η·√k`. Returns `None` when `‖g‖ = 0`.
pub fn adaptive_rescale(g: &[f32], eta: f64) -> Option<Vec<f32>> {
    let norm = g.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    let alpha = eta * (g.len() as f64).sqrt() / norm;
    Some(g.iter().map(|&v| (f64::from(v) * alpha) as f32).collect())
}

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: BTreeMap<String, Vec<f32>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn velocity(&self, name: &str) -> Option<&[f32]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

/// One update of a single parameter:
/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
pub fn sgd_update(p: ParamMut<'_>, state: &mut SgdState, lr: f64, cfg: &OptimConfig) -> Result<()> {
    if p.grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
    }
    let rescaled;
    let grad: &[f32] = match (p.kind, cfg.adaptive_eta) {
        (ParamKind::AdderWeight, Some(eta)) => match adaptive_rescale(p.grad, eta) {
            Some(g) => {
                rescaled = g;
                &rescaled
            }
            None => return Ok(()),
        },
        _ => p.grad,
    };
    let v = state
        .velocity
        .entry(p.name)
        .or_insert_with(|| vec![0.0; grad.len()]);
    if v.len() != grad.len() {
        return Err(Error::Shape("momentum buffer length changed".into()));
    }
    let (mu, wd) = (cfg.momentum, cfg.weight_decay);
    for ((w, vi), &g) in p.value.iter_mut().zip(v.iter_mut()).zip(grad) {
        let next = mu * f64::from(*vi) + f64::from(g) + wd * f64::from(*w);
        *vi = next as f32;
        *w = (f64::from(*w) - lr * next) as f32;
    }
    Ok(())
}

/// Anything exposing named parameters with gradients.
pub trait Trainable {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_>));
    fn zero_grad(&mut self);
}

/// Applies [`sgd_update`] to every parameter of `model`.
pub fn sgd_step(model: &mut dyn Trainable, state: &mut SgdState, lr: f64, cfg: &OptimConfig) -> Result<()> {
    let mut first_err = None;
    model.visit_params(&mut |p| {
        if first_err.is_none() {
            if let Err(e) = sgd_update(p, state, lr, cfg) {
                first_err = Some(e);
            }
        }
    });
    first_err.map_or(Ok(()), Err)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flat {
        kind: ParamKind,
        w: Vec<f32>,
        g: Vec<f32>,
    }

    impl Trainable for Flat {
        fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
            f(ParamMut {
                name: "layer.weight".into(),
                kind: self.kind,
                value: &mut self.w,
                grad: &self.g,
            });
        }
        fn zero_grad(&mut self) {
            self.g.fill(0.0);
        }
    }

    fn plain(lr: f64) -> OptimConfig {
        OptimConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            adaptive_eta: None,
            ..OptimConfig::new(lr, 10)
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.1, 0.0).unwrap(), 0.1);
        assert!((cosine_lr(100, 100, 0.1, 0.01).unwrap() - 0.01).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.1, 0.0).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.1, 0.0).is_err());
        assert!(cosine_lr(0, 0, 0.1, 0.0).is_err());
    }

    #[test]
    fn step_schedule() {
        let s = Schedule::Step { milestones: vec![3, 6], gamma: 0.1 };
        assert_eq!(s.lr(1.0, 2).unwrap(), 1.0);
        assert!((s.lr(1.0, 3).unwrap() - 0.1).abs() < 1e-12);
        assert!((s.lr(1.0, 9).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut m = Flat { kind: ParamKind::ConvWeight, w: vec![1.0, -2.0, 3.0], g: vec![0.0; 3] };
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::new(0.1, 10) };
        let mut st = SgdState::new();
        for _ in 0..5 {
            sgd_step(&mut m, &mut st, 0.1, &cfg).unwrap();
        }
        assert_eq!(m.w, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn plain_step_is_exact() {
        let mut m = Flat { kind: ParamKind::ConvWeight, w: vec![1.0, 2.0], g: vec![0.5, -0.25] };
        sgd_step(&mut m, &mut SgdState::new(), 0.1, &plain(0.1)).unwrap();
        assert_eq!(m.w, vec![(1.0f64 - 0.05) as f32, (2.0f64 + 0.025) as f32]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut m = Flat { kind: ParamKind::Bias, w: vec![0.0], g: vec![1.0] };
        let cfg = OptimConfig { weight_decay: 0.0, adaptive_eta: None, ..OptimConfig::new(1.0, 10) };
        let mut st = SgdState::new();
        sgd_step(&mut m, &mut st, 1.0, &cfg).unwrap();
        sgd_step(&mut m, &mut st, 1.0, &cfg).unwrap();
        // v1 = 1, v2 = 1.9.
        assert!((m.w[0] + 2.9).abs() < 1e-6);
        assert!((st.velocity("layer.weight").unwrap()[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn adaptive_norm_and_scale_invariance() {
        let g: Vec<f32> = (0..36).map(|i| ((i * 7 % 11) as f32 - 5.0) * 1e-3).collect();
        let r = adaptive_rescale(&g, 0.1).unwrap();
        let norm = r.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 0.1 * 6.0).abs() < 1e-5);
        let g10: Vec<f32> = g.iter().map(|v| v * 10.0).collect();
        let r10 = adaptive_rescale(&g10, 0.1).unwrap();
        for (a, b) in r.iter().zip(&r10) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(adaptive_rescale(&[0.0; 4], 0.1).is_none());
    }

    #[test]
    fn adaptive_applies_only_to_adder_weights_and_skips_zero_norm() {
        let cfg = OptimConfig { adaptive_eta: Some(0.1), ..plain(1.0) };
        let mut adder = Flat { kind: ParamKind::AdderWeight, w: vec![0.0; 4], g: vec![100.0, 0.0, 0.0, 0.0] };
        sgd_step(&mut adder, &mut SgdState::new(), 1.0, &cfg).unwrap();
        assert!((adder.w[0] + 0.2).abs() < 1e-6);
        let mut conv = Flat { kind: ParamKind::ConvWeight, w: vec![0.0; 4], g: vec![100.0, 0.0, 0.0, 0.0] };
        sgd_step(&mut conv, &mut SgdState::new(), 1.0, &cfg).unwrap();
        assert_eq!(conv.w[0], -100.0);
        let mut still = Flat { kind: ParamKind::AdderWeight, w: vec![1.0; 4], g: vec![0.0; 4] };
        let decayed = OptimConfig { weight_decay: 0.5, ..cfg };
        sgd_step(&mut still, &mut SgdState::new(), 1.0, &decayed).unwrap();
        assert_eq!(still.w, vec![1.0; 4]);
    }

    #[test]
    fn non_finite_gradient_names_the_layer() {
        let mut m = Flat { kind: ParamKind::ConvWeight, w: vec![0.0], g: vec![f32::NAN] };
        let err = sgd_step(&mut m, &mut SgdState::new(), 0.1, &plain(0.1)).unwrap_err();
        assert!(err.to_string().contains("layer.weight"));
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::new(0.1, 10).validate().is_ok());
        assert!(OptimConfig::new(0.0, 10).validate().is_err());
        assert!(OptimConfig::new(0.1, 0).validate().is_err());
    }
}
