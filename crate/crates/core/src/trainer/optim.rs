//! AdamW over a flat parameter vector and a reduce-on-plateau schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

impl AdamW {
    /// Decoupled decay `p *= 1 - lr·wd`, then the bias-corrected Adam step.
    pub fn step(&self, params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), state.m.len());
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Multiplies the rate by `factor` once the monitored loss has failed to
/// strictly improve for `patience` consecutive epochs, then restarts the
/// count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's monitored loss and returns the next rate.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_is_stationary() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![0.3, -1.2, 4.0];
        let mut s = AdamState::new(3);
        for _ in 0..5 {
            opt.step(&mut p, &[0.0; 3], &mut s, 1e-3);
        }
        assert_eq!(p, vec![0.3, -1.2, 4.0]);
    }

    #[test]
    fn first_steps_match_hand_rolled_moments() {
        let opt = AdamW::default();
        let (lr, g, p0) = (1e-3, -0.25, 2.0);
        let mut p = vec![p0];
        let mut s = AdamState::new(1);
        opt.step(&mut p, &[g], &mut s, lr);
        // m_hat = g, v_hat = g^2 after one step
        let expect1 = p0 * (1.0 - lr * 1e-4) - lr * g / (g.abs() + 1e-8);
        assert!((p[0] - expect1).abs() < 1e-15);
        assert!((p[0] - (p0 + lr)).abs() < 1e-6);

        opt.step(&mut p, &[g], &mut s, lr);
        let m = 0.9 * 0.1 * g + 0.1 * g;
        let v = 0.999 * 0.001 * g * g + 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9f64.powi(2));
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let expect2 = expect1 * (1.0 - lr * 1e-4) - lr * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - expect2).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let opt = AdamW {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        opt.step(&mut p, &[0.0], &mut s, 0.5);
        assert!((p[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn plateau_reduces_after_patience() {
        let mut s = PlateauScheduler::new(1e-3, 0.5, 2, 1e-6);
        assert_eq!(s.observe(1.0), 1e-3);
        assert_eq!(s.observe(0.9), 1e-3);
        assert_eq!(s.observe(0.9), 1e-3);
        assert_eq!(s.observe(0.95), 5e-4);
        assert_eq!(s.bad_epochs, 0);
        assert_eq!(s.observe(0.91), 5e-4);
        assert_eq!(s.observe(0.92), 2.5e-4);
        assert_eq!(s.observe(0.1), 2.5e-4);
        let mut floor = PlateauScheduler::new(1e-6, 0.1, 1, 1e-6);
        floor.observe(1.0);
        assert_eq!(floor.observe(1.0), 1e-6);
    }
}
