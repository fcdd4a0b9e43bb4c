//! Adam optimizer with bias correction.

use super::Tensor;
use crate::error::{Error, Result};

/// Per-parameter first/second moment state for one parameter group.
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &[&Tensor]) -> Self {
        Self::new(lr, &params.iter().map(|p| p.numel()).collect::<Vec<_>>())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over an aligned (params, grads) list.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam_step: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != grads[i].shape() || p.numel() != self.m[i].len() {
                return Err(Error::Dim(format!(
                    "adam_step: param {i} shape {:?} vs grad {:?}",
                    p.shape(),
                    grads[i].shape()
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, pv) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
