//! AdamW with decoupled weight decay and the warmup/decay learning-rate
//! schedule.

use serde::{Deserialize, Serialize};
use srcorrnet_nn::{ParamStore, Real, Tensor};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// `peak * min(1, step / warmup) * decay^max(0, epoch - decay_start)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub decay: f64,
    pub decay_start: u32,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            peak: 1e-3,
            warmup_steps: 5000,
            decay: 0.95,
            decay_start: 50,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0 && self.peak.is_finite()) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return invalid("lr schedule", format!("peak {} decay {}", self.peak, self.decay));
        }
        Ok(())
    }

    /// Rate for update number `step` (1-based) in `epoch` (0-based).
    pub fn lr_at(&self, step: u64, epoch: u32) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.warmup_steps as f64).min(1.0)
        };
        self.peak * warm * self.decay.powi(epoch.saturating_sub(self.decay_start) as i32)
    }
}

/// First and second moment estimates, one pair of buffers per parameter in
/// store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    /// Updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new<T: Real>(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Applies one update with rate `lr`. Parameters without a gradient keep
    /// their moments and receive weight decay only.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return invalid("optimizer", format!("{} moment buffers for {} parameters", self.m.len(), store.len()));
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (_, p)) in store.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let value = p.value.data_mut();
            let grad = p.grad.as_ref().map(|g| g.data());
            for j in 0..value.len() {
                let w = value[j].f64();
                let mut w_new = w - lr * weight_decay * w;
                if let Some(g) = grad {
                    let gj = g[j].f64();
                    let mj = beta1 * m[j] as f64 + (1.0 - beta1) * gj;
                    let vj = beta2 * v[j] as f64 + (1.0 - beta2) * gj * gj;
                    m[j] = mj as f32;
                    v[j] = vj as f32;
                    w_new -= lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                }
                value[j] = T::of(w_new);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use srcorrnet_nn::Init;

    #[test]
    fn schedule_closed_forms() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(2500, 0), 0.5 * s.peak);
        assert_eq!(s.lr_at(5000, 0), s.peak);
        assert_eq!(s.lr_at(9000, 50), s.peak);
        assert_eq!(s.lr_at(9000, 52), s.peak * 0.95 * 0.95);
        let flat = LrSchedule { warmup_steps: 0, ..s };
        assert_eq!(flat.lr_at(1, 0), s.peak);
    }

    #[test]
    fn first_update_moves_by_lr_in_gradient_sign() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.register("w", &[3], Init::Zeros).unwrap();
        store.add_grad(id, &[2.0, -0.5, 0.0]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &store);
        opt.step(&mut store, 0.1).unwrap();
        let w = store.get(id).value.data();
        assert!((w[0] + 0.1).abs() < 1e-6);
        assert!((w[1] - 0.1).abs() < 1e-6);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.register("w", &[1], Init::Ones).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, 0.5).unwrap();
        // No gradient: only the decay term 1 - lr * wd applies.
        assert!((store.get(id).value.data()[0] - (1.0 - 0.5 * 0.01)).abs() < 1e-15);
    }
}
