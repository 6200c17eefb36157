//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
}

impl Default for AdamWConfig {
    /// Optimizer constants used for large-batch CLIP pre-training.
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.5, base_lr: 5e-4 }
    }
}

/// Moment estimates for one parameter group, flattened in a fixed tensor order.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub config: AdamWConfig,
}

/// One tensor's slice of a parameter group.
pub struct ParamSlot<'a> {
    pub name: &'a str,
    pub values: &'a mut [f32],
    pub grads: &'a [f32],
    /// Whether decoupled weight decay applies to this tensor.
    pub decay: bool,
}

impl AdamWState {
    pub fn new(param_count: usize, config: AdamWConfig) -> Self {
        Self { step: 0, m: vec![0.0; param_count], v: vec![0.0; param_count], config }
    }

    pub fn param_count(&self) -> usize {
        self.m.len()
    }

    /// One AdamW update over every slot of the group, in order.
    ///
    /// Fails before touching any parameter if a gradient is non-finite or the slot
    /// sizes do not add up to the state's parameter count.
    pub fn apply(&mut self, group: &str, slots: &mut [ParamSlot<'_>], lr: f64) -> Result<(), NumericsError> {
        let total: usize = slots.iter().map(|s| s.values.len()).sum();
        if total != self.m.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "adamw_step",
                lhs: vec![self.m.len()],
                rhs: vec![total],
            });
        }
        for s in slots.iter() {
            if s.grads.len() != s.values.len() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adamw_step",
                    lhs: vec![s.values.len()],
                    rhs: vec![s.grads.len()],
                });
            }
            if s.grads.iter().any(|g| !g.is_finite()) {
                return Err(NumericsError::NanGradient { group: group.to_string(), param: s.name.to_string() });
            }
        }
        if lr < 0.0 {
            return Err(NumericsError::InvalidHyper { what: "learning rate must be >= 0" });
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut off = 0;
        for s in slots.iter_mut() {
            let decay = if s.decay { (lr * c.weight_decay) as f32 } else { 0.0 };
            for (i, (p, &g)) in s.values.iter_mut().zip(s.grads).enumerate() {
                let g = g as f64;
                let m = c.beta1 * self.m[off + i] as f64 + (1.0 - c.beta1) * g;
                let v = c.beta2 * self.v[off + i] as f64 + (1.0 - c.beta2) * g * g;
                self.m[off + i] = m as f32;
                self.v[off + i] = v as f32;
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
                *p = (*p - decay * *p) - update as f32;
            }
            off += s.values.len();
        }
        Ok(())
    }
}

/// Linear warmup to `max_lr`, then cosine decay to `floor_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub max_lr: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub floor_lr: f64,
}

impl CosineSchedule {
    pub fn new(max_lr: f64, total_steps: u64, warmup_steps: u64, floor_lr: f64) -> Result<Self, NumericsError> {
        if total_steps == 0 {
            return Err(NumericsError::InvalidHyper { what: "total_steps must be positive" });
        }
        if floor_lr < 0.0 || max_lr < floor_lr {
            return Err(NumericsError::InvalidHyper { what: "need 0 <= floor_lr <= max_lr" });
        }
        Ok(Self { max_lr, total_steps, warmup_steps: warmup_steps.min(total_steps), floor_lr })
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return self.floor_lr;
        }
        if step < self.warmup_steps {
            return self.max_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.floor_lr + 0.5 * (self.max_lr - self.floor_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_once(theta: f32, g: f32, wd: f64, lr: f64) -> f32 {
        let mut st = AdamWState::new(1, AdamWConfig { weight_decay: wd, base_lr: lr, ..Default::default() });
        let mut vals = [theta];
        let grads = [g];
        st.apply("g", &mut [ParamSlot { name: "p", values: &mut vals, grads: &grads, decay: true }], lr)
            .unwrap();
        assert_eq!(st.step, 1);
        vals[0]
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = v̂ = 1 after bias correction, so the update is lr / (1 + eps).
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((step_once(1.0, 1.0, 0.0, 0.1) as f64 - expect).abs() < 1e-7);
    }

    #[test]
    fn zero_grad_without_decay_is_fixed_point() {
        assert_eq!(step_once(0.37, 0.0, 0.0, 0.1), 0.37);
    }

    #[test]
    fn zero_grad_with_decay_is_pure_shrink() {
        let out = step_once(2.0, 0.0, 0.5, 0.1);
        assert!((out - 1.9).abs() < 1e-7, "{out}");
    }

    #[test]
    fn wd_zero_matches_adam_over_many_steps() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = AdamWState::new(1, cfg);
        let mut p = [0.5f32];
        let (mut m, mut v, mut adam) = (0.0f64, 0.0f64, 0.5f64);
        for t in 1..=20 {
            let g = (t as f32 * 0.3).sin();
            st.apply("g", &mut [ParamSlot { name: "p", values: &mut p, grads: &[g], decay: true }], 0.01).unwrap();
            m = 0.9 * m + 0.1 * g as f64;
            v = 0.999 * v + 0.001 * (g as f64) * (g as f64);
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            adam -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0] as f64 - adam).abs() < 1e-5);
    }

    #[test]
    fn nan_gradient_names_group() {
        let mut st = AdamWState::new(2, AdamWConfig::default());
        let mut vals = [1.0, 2.0];
        let err = st
            .apply("text", &mut [ParamSlot { name: "w", values: &mut vals, grads: &[0.0, f32::NAN], decay: true }], 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("text"), "{err}");
        assert_eq!(st.step, 0);
        assert_eq!(vals, [1.0, 2.0]);
    }

    #[test]
    fn schedule_boundaries() {
        let s = CosineSchedule::new(1e-3, 100, 0, 0.0).unwrap();
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(100), 0.0);
        assert!((s.lr_at(50) - 0.5e-3).abs() < 1e-15);
        assert_eq!(s.lr_at(1000), 0.0);

        let w = CosineSchedule::new(1.0, 100, 10, 0.1).unwrap();
        assert_eq!(w.lr_at(0), 0.0);
        assert!((w.lr_at(5) - 0.5).abs() < 1e-12);
        // Continuous at the warmup boundary.
        assert!((w.lr_at(9) - 0.9).abs() < 1e-12);
        assert_eq!(w.lr_at(10), 1.0);
        let mut prev = f64::INFINITY;
        for t in 10..=100 {
            let lr = w.lr_at(t);
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(w.lr_at(100), 0.1);
    }
}
