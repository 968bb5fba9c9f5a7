//! AdamW with decoupled weight decay, and a reduce-on-plateau scheduler.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter first/second moments plus the shared step count. Slots are
/// keyed positionally: the caller passes parameters and gradients in the
/// same order every step.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    moments: Vec<Moments>,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, param_sizes: &[usize]) -> Self {
        let moments = param_sizes
            .iter()
            .map(|&n| Moments { m: vec![0.0; n], v: vec![0.0; n] })
            .collect();
        AdamW { cfg, step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One decoupled-weight-decay update over all slots.
    /// `params[i]` and `grads[i]` must match the size given at construction;
    /// a `None` gradient is an error naming the parameter by `names[i]`.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[Option<&[f64]>],
        names: &dyn Fn(usize) -> String,
    ) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != self.moments.len() {
            return Err(Error::Config(format!(
                "optimizer built for {} parameters, got {} params / {} grads",
                self.moments.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let grad = grad.ok_or_else(|| Error::MissingGrad { name: names(i) })?;
            let slot = &mut self.moments[i];
            debug_assert_eq!(slot.m.len(), param.len());
            debug_assert_eq!(grad.len(), param.len());
            for j in 0..param.len() {
                let g = grad[j];
                slot.m[j] = beta1 * slot.m[j] + (1.0 - beta1) * g;
                slot.v[j] = beta2 * slot.v[j] + (1.0 - beta2) * g * g;
                let m_hat = slot.m[j] / bc1;
                let v_hat = slot.v[j] / bc2;
                // decoupled decay, then the adaptive step
                param[j] -= lr * weight_decay * param[j];
                param[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    /// Relative improvement below which an epoch counts as non-improving.
    pub rel_threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            patience: 5,
            factor: 0.5,
            rel_threshold: 1e-4,
            min_lr: 1e-6,
        }
    }
}

/// Lowers the learning rate when the monitored metric (lower is better)
/// stops improving for `patience` consecutive epochs. The rate never rises
/// and never drops below `min_lr`.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    cfg: PlateauConfig,
    lr: f64,
    best: Option<f64>,
    stale_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: PlateauConfig, initial_lr: f64) -> Self {
        PlateauScheduler { cfg, lr: initial_lr, best: None, stale_epochs: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Record one epoch's metric; returns the (possibly reduced) rate.
    pub fn step(&mut self, metric: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(best) => metric < best - best.abs() * self.cfg.rel_threshold,
        };
        if improved {
            self.best = Some(metric);
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
            if self.stale_epochs > self.cfg.patience {
                self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
                self.stale_epochs = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(_: usize) -> String {
        "p".into()
    }

    #[test]
    fn first_step_matches_hand_evaluated_recurrence() {
        // g=1, m=v=0, beta1=0.9, beta2=0.999, eps=1e-8, lambda=0, lr=1e-3:
        // m1=0.1, v1=0.001, m_hat=1, v_hat=1 => delta = -lr/(1+eps)
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &[1]);
        let mut p = vec![0.5];
        let g = vec![1.0];
        opt.step(&mut [&mut p], &[Some(&g)], &names).unwrap();
        let expected_delta = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - (0.5 + expected_delta)).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_no_decay_leaves_param() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &[2]);
        let mut p = vec![0.7, -0.3];
        let g = vec![0.0, 0.0];
        opt.step(&mut [&mut p], &[Some(&g)], &names).unwrap();
        assert_eq!(p, vec![0.7, -0.3]);
    }

    #[test]
    fn zero_grad_with_decay_shrinks_exactly() {
        let cfg = AdamWConfig { weight_decay: 0.1, lr: 0.01, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &[1]);
        let mut p = vec![2.0];
        let g = vec![0.0];
        opt.step(&mut [&mut p], &[Some(&g)], &names).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut opt = AdamW::new(AdamWConfig::default(), &[1]);
        let mut p = vec![1.0];
        let err = opt.step(&mut [&mut p], &[None], &names).unwrap_err();
        assert!(err.to_string().contains('p'));
    }

    #[test]
    fn plateau_reduces_after_patience() {
        let cfg = PlateauConfig { patience: 3, factor: 0.5, rel_threshold: 1e-4, min_lr: 1e-6 };
        let mut sched = PlateauScheduler::new(cfg, 1e-3);
        // improving metric: lr constant
        for m in [10.0, 9.0, 8.0, 7.0] {
            assert_eq!(sched.step(m), 1e-3);
        }
        // patience+1 non-improving epochs: one halving
        for _ in 0..3 {
            assert_eq!(sched.step(7.0), 1e-3);
        }
        assert_eq!(sched.step(7.0), 5e-4);
        // lr never rises again even when improving
        assert_eq!(sched.step(1.0), 5e-4);
    }

    #[test]
    fn plateau_respects_min_lr() {
        let cfg = PlateauConfig { patience: 0, factor: 0.1, rel_threshold: 1e-4, min_lr: 1e-6 };
        let mut sched = PlateauScheduler::new(cfg, 1e-5);
        sched.step(1.0);
        for _ in 0..10 {
            sched.step(1.0);
        }
        assert_eq!(sched.lr(), 1e-6);
    }
}
