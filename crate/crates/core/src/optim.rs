//! AdamW with decoupled weight decay, and a reduce-on-plateau scheduler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

/// AdamW state. Decay multiplies the parameter directly (never the gradient)
/// and moments are bias-corrected. Defaults follow the common
/// (0.9, 0.999, 1e-8) convention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        let m = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m,
            v,
        }
    }

    /// One optimizer step over every parameter. Gradients must be populated
    /// (zero is fine; absent buffers are a contract error).
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::contract("optimizer state does not match parameter set"));
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);

        for i in 0..params.len() {
            let id = crate::params::ParamId(i);
            let name = params.name(id).to_string();
            let tensor = params.get_mut(id);
            let grad = tensor
                .grad
                .as_ref()
                .ok_or(Error::MissingGradient { name })?
                .clone();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..tensor.data.len() {
                let g = grad[j];
                // Decoupled decay first, then the Adam update.
                tensor.data[j] *= 1.0 - self.lr * self.weight_decay;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                tensor.data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau: after `patience` consecutive epochs without the
/// monitored value improving by more than `min_delta`, the learning rate is
/// multiplied by `factor` and the counter resets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    pub min_delta: f64,
    pub best: Option<f64>,
    pub since_improvement: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            patience,
            factor,
            min_delta: 0.0,
            best: None,
            since_improvement: 0,
        }
    }

    /// Called once per epoch with the monitored validation loss. Returns true
    /// when the learning rate was reduced this epoch.
    pub fn step(&mut self, monitored: f64, lr: &mut f64) -> bool {
        match self.best {
            None => {
                self.best = Some(monitored);
                self.since_improvement = 0;
                false
            }
            Some(best) if monitored < best - self.min_delta => {
                self.best = Some(monitored);
                self.since_improvement = 0;
                false
            }
            Some(_) => {
                self.since_improvement += 1;
                if self.since_improvement >= self.patience {
                    *lr *= self.factor;
                    self.since_improvement = 0;
                    true
                } else {
                    false
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn single_step_matches_hand_evaluated_update() {
        // g=1, theta=0, lr=1e-4, betas=(0.9,0.999), eps=1e-8, decay=0:
        //   m=0.1, v=0.001, m_hat=1, v_hat=1 -> theta = -1e-4/(1+1e-8)
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::scalar(0.0));
        params.get_mut(id).grad = Some(vec![1.0]);
        let mut opt = AdamW::new(&params, 1e-4, 0.0);
        opt.step(&mut params).unwrap();
        let expected = -1e-4 * 1.0 / (1.0f64.sqrt() + 1e-8);
        assert!((params.get(id).data[0] - expected).abs() < 1e-18);
        assert!((params.get(id).data[0] + 1e-4).abs() < 1e-10);
    }

    #[test]
    fn zero_grad_zero_decay_is_a_noop() {
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::vector(vec![0.25, -3.5]));
        let mut opt = AdamW::new(&params, 1e-2, 0.0);
        opt.step(&mut params).unwrap();
        assert_eq!(params.get(id).data, vec![0.25, -3.5]);
    }

    #[test]
    fn decoupled_decay_multiplies_the_parameter() {
        // decay=0.01, g=0, lr=0.1, theta=1.0 -> theta = 0.999
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::scalar(1.0));
        let mut opt = AdamW::new(&params, 0.1, 0.01);
        opt.step(&mut params).unwrap();
        assert!((params.get(id).data[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::scalar(1.0));
        params.get_mut(id).grad = None;
        let mut opt = AdamW::new(&params, 0.1, 0.0);
        assert!(matches!(
            opt.step(&mut params),
            Err(Error::MissingGradient { .. })
        ));
    }

    #[test]
    fn step_counter_increases_by_one() {
        let mut params = ParamSet::new();
        params.add("w", Tensor::scalar(1.0));
        let mut opt = AdamW::new(&params, 0.1, 0.0);
        for expect in 1..=3 {
            opt.step(&mut params).unwrap();
            assert_eq!(opt.step_count, expect);
        }
    }

    #[test]
    fn plateau_reduces_after_patience_epochs() {
        let mut sched = PlateauScheduler::new(5, 0.1);
        let mut lr = 1e-4;
        for _ in 0..6 {
            sched.step(1.0, &mut lr);
        }
        assert!((lr - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn strictly_decreasing_losses_never_reduce() {
        let mut sched = PlateauScheduler::new(5, 0.1);
        let mut lr = 1e-4;
        for i in 0..20 {
            sched.step(1.0 - i as f64 * 0.01, &mut lr);
        }
        assert_eq!(lr, 1e-4);
    }

    #[test]
    fn improvement_resets_the_counter() {
        let mut sched = PlateauScheduler::new(5, 0.1);
        let mut lr = 1e-4;
        for loss in [1.0, 1.0, 1.0, 0.5, 1.0, 1.0] {
            sched.step(loss, &mut lr);
        }
        assert_eq!(lr, 1e-4);
    }
}
