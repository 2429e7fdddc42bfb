//! Adam with L2-coupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, TensorError};
use crate::scalar::Scalar;
use crate::tensor::param::ParamStore;

/// Training hyperparameters. The defaults are the pipeline's operating
/// point: lr 5e-4, betas (0.5, 0.999), eps 1e-6, weight decay 5e-4,
/// mini-batch 4.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-6,
            weight_decay: 5e-4,
            batch_size: 4,
            steps: 500,
            seed: 0,
        }
    }
}

/// Per-parameter first/second moment state.
pub struct Adam<S> {
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    wd: S,
    beta1_f64: f64,
    beta2_f64: f64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step_count: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            lr: S::from_f64(cfg.learning_rate),
            beta1: S::from_f64(cfg.beta1),
            beta2: S::from_f64(cfg.beta2),
            eps: S::from_f64(cfg.epsilon),
            wd: S::from_f64(cfg.weight_decay),
            beta1_f64: cfg.beta1,
            beta2_f64: cfg.beta2,
            m: Vec::new(),
            v: Vec::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update from the gradients accumulated in `store`. Rejects
    /// non-finite gradients before touching any state.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<(), PipelineError> {
        store.check_grads_finite().map_err(|_| {
            PipelineError::Tensor(TensorError::NonFinite { op: "adam gradients" })
        })?;
        if self.m.is_empty() {
            for id in store.ids() {
                let n = store.value(id).numel();
                self.m.push(vec![S::zero(); n]);
                self.v.push(vec![S::zero(); n]);
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = S::from_f64(1.0 / (1.0 - self.beta1_f64.powi(t)));
        let bc2 = S::from_f64(1.0 / (1.0 - self.beta2_f64.powi(t)));
        let one = S::one();
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let grads: Vec<S> = store.grad(id).to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let theta = store.value_mut(id).data_mut();
            for j in 0..theta.len() {
                let g = grads[j] + self.wd * theta[j];
                m[j] = self.beta1 * m[j] + (one - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (one - self.beta2) * g * g;
                let m_hat = m[j] * bc1;
                let v_hat = v[j] * bc2;
                theta[j] = theta[j] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg_no_decay() -> TrainConfig {
        TrainConfig { weight_decay: 0.0, ..TrainConfig::default() }
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        // from zero state: m_hat = g, v_hat = g^2, update = -lr*g/(|g|+eps)
        let cfg = cfg_no_decay();
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        store.accumulate_grad(id, &[0.3, -0.7, 0.001]);
        let mut adam = Adam::new(&cfg);
        adam.step(&mut store).unwrap();
        let w = store.value(id).data();
        for (j, (&g, &x0)) in [0.3, -0.7, 0.001].iter().zip(&[1.0, -2.0, 0.5]).enumerate() {
            let expect = x0 - cfg.learning_rate * g / (g.abs() + cfg.epsilon);
            assert!((w[j] - expect).abs() < 1e-12, "component {j}");
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_a_no_op() {
        let cfg = cfg_no_decay();
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::new(vec![2], vec![0.25, -4.0]).unwrap());
        let mut adam = Adam::new(&cfg);
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(id).data(), &[0.25, -4.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn nan_gradients_abort_the_step() {
        let cfg = TrainConfig::default();
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::new(vec![1], vec![1.0]).unwrap());
        store.accumulate_grad(id, &[f32::NAN]);
        let mut adam = Adam::new(&cfg);
        assert!(adam.step(&mut store).is_err());
        assert_eq!(store.value(id).data(), &[1.0], "state untouched after abort");
    }

    #[test]
    fn deterministic_trajectories() {
        let cfg = TrainConfig::default();
        let run = || {
            let mut store = ParamStore::<f32>::new();
            let id = store.add("w", Tensor::new(vec![2], vec![0.5, -0.25]).unwrap());
            let mut adam = Adam::new(&cfg);
            for k in 0..50 {
                store.zero_grads();
                let w = store.value(id).data().to_vec();
                store.accumulate_grad(id, &[w[0] * 0.1 + k as f32 * 1e-3, w[1].sin()]);
                adam.step(&mut store).unwrap();
            }
            store.value(id).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "same seed/config must give bit-identical trajectories");
    }
}
