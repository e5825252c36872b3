//! Adam optimizer with bias correction.

use crate::error::{Error, Result};

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moment accumulators plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[&Tensor], config: AdamConfig) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        AdamState { config, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Open a new optimizer step; parameters are then updated one at a
    /// time with [`AdamState::update_one`].
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Bias-corrected Adam update of parameter `idx` within the step
    /// opened by [`AdamState::begin_step`].
    pub fn update_one(&mut self, idx: usize, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if idx >= self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                msg: format!("parameter index {idx} out of {}", self.m.len()),
            });
        }
        if param.shape() != grad.shape() || param.shape() != self.m[idx].shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                msg: format!("parameter {:?} vs gradient {:?}", param.shape(), grad.shape()),
            });
        }
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let pd = param.data_mut();
        let gd = grad.data();
        let md = self.m[idx].data_mut();
        let vd = self.v[idx].data_mut();
        for i in 0..pd.len() {
            md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gd[i];
            vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }

    /// One update over all parameters. `params` and `grads` must be
    /// ordered exactly like the slice this state was created from.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                msg: format!(
                    "state holds {} parameters, got {} params / {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        self.begin_step();
        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update_one(idx, p, g)?;
        }
        Ok(())
    }
}
