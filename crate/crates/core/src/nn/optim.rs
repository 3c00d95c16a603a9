use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub epochs: usize,
    pub train_batch: usize,
    pub val_batch: usize,
    pub test_batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_drop_factor: f64,
    /// 1-based epochs at which the learning rate is multiplied by the drop factor.
    pub lr_drop_epochs: Vec<usize>,
    pub window: usize,
    pub horizon: usize,
    pub num_beams: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            epochs: 20,
            train_batch: 8,
            val_batch: 1024,
            test_batch: 1024,
            lr: 5e-4,
            weight_decay: 0.0,
            lr_drop_factor: 0.1,
            lr_drop_epochs: vec![12, 18],
            window: 8,
            horizon: 3,
            num_beams: 32,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.epochs,
            self.train_batch,
            self.val_batch,
            self.test_batch,
            self.window,
            self.num_beams,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidConfig("epochs, batch sizes, window and beams must be positive".into()));
        }
        if self.num_beams < 2 {
            return Err(Error::InvalidConfig("need at least 2 beams".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_drop_factor > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("lr and drop factor must be positive, weight decay nonnegative".into()));
        }
        if let Some(e) = self.lr_drop_epochs.iter().find(|&&e| e < 1 || e > self.epochs) {
            return Err(Error::InvalidConfig(format!("lr drop epoch {e} outside [1, {}]", self.epochs)));
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch; drops compound.
pub fn lr_schedule(epoch: usize, hp: &HyperParams) -> f64 {
    let drops = hp.lr_drop_epochs.iter().filter(|&&e| epoch >= e).count();
    hp.lr * hp.lr_drop_factor.powi(drops as i32)
}

/// Adam with bias correction. Weight decay, when nonzero, is added to the
/// gradient (L2 penalty).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of `params` from matching `grads` at learning rate `lr`.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<T>>,
        grads: &[Vec<T>],
        lr: f64,
    ) -> Result<()> {
        let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(Error::shape("adam", params.len(), grads.len()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape("adam state", self.m.len(), params.len()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps, wd) = (T::lit(lr), T::lit(self.eps), T::lit(self.weight_decay));
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::shape("adam", p.len(), g.len()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] + wd * *w;
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops_compound() {
        let hp = HyperParams::default();
        assert_eq!(lr_schedule(1, &hp), 5e-4);
        assert_eq!(lr_schedule(11, &hp), 5e-4);
        assert!((lr_schedule(12, &hp) - 5e-5).abs() < 1e-18);
        assert!((lr_schedule(17, &hp) - 5e-5).abs() < 1e-18);
        assert!((lr_schedule(18, &hp) - 5e-6).abs() < 1e-18);
        assert!((lr_schedule(20, &hp) - 5e-6).abs() < 1e-18);
    }

    #[test]
    fn validation() {
        assert!(HyperParams::default().validate().is_ok());
        let bad = HyperParams {
            lr_drop_epochs: vec![21],
            ..HyperParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = HyperParams {
            train_batch: 0,
            ..HyperParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::filled(vec![1], 0.3);
        let mut opt = Adam::new(0.0);
        opt.step([&mut p], &[vec![1.0]], 5e-4).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        let expected = 0.3 - 5e-4 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::from_fn(vec![4], |i| i as f64 - 1.5);
        let before = p.clone();
        let mut opt = Adam::new(0.0);
        for _ in 0..5 {
            opt.step([&mut p], &[vec![0.0; 4]], 1e-2).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn identical_runs_match() {
        let run = || {
            let mut p = Tensor::<f64>::filled(vec![3], 1.0);
            let mut opt = Adam::new(0.0);
            for k in 0..10 {
                let g: Vec<f64> = p.data().iter().map(|w| 2.0 * w + k as f64 * 0.1).collect();
                opt.step([&mut p], &[g], 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::<f64>::filled(vec![2], 3.0);
        let mut opt = Adam::new(0.0);
        for _ in 0..2000 {
            let g: Vec<f64> = p.data().iter().map(|w| 2.0 * (w - 1.0)).collect();
            opt.step([&mut p], &[g], 1e-2).unwrap();
        }
        assert!(p.data().iter().all(|w| (w - 1.0).abs() < 1e-3));
    }
}
