//! Classic momentum SGD with step-decay learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::net::Model;
use crate::model::tensor::Param;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    /// Learning rate multiplies by this every `decay_every_epochs`.
    pub decay_gamma: f64,
    pub decay_every_epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { base_lr: 0.05, momentum: 0.9, decay_gamma: 0.3, decay_every_epochs: 3 }
    }
}

impl SgdConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.decay_every_epochs == 0 {
            return self.base_lr;
        }
        self.base_lr * self.decay_gamma.powi((epoch / self.decay_every_epochs) as i32)
    }
}

/// v <- momentum * v + g;  p <- p - lr * v. Gradients are consumed (zeroed).
pub fn sgd_step_param(p: &mut Param, lr: f64, momentum: f64) {
    let g = p.grad.data();
    let v = p.momentum.data_mut();
    for (vi, &gi) in v.iter_mut().zip(g) {
        *vi = momentum * *vi + gi;
    }
    for (pi, &vi) in p.value.data_mut().iter_mut().zip(p.momentum.data()) {
        *pi -= lr * vi;
    }
    p.zero_grad();
}

/// Applies one SGD step to every model parameter, refusing non-finite
/// gradients with the offending tensor's name.
pub fn sgd_step(model: &mut Model, lr: f64, momentum: f64) -> Result<()> {
    let mut bad: Option<String> = None;
    model.visit_params(&mut |name, p| {
        if bad.is_none() && !p.grad.all_finite() {
            bad = Some(name.to_string());
        }
    });
    if let Some(name) = bad {
        return Err(Error::NonFiniteGradient(name));
    }
    model.visit_params_mut(&mut |_, p| sgd_step_param(p, lr, momentum));
    Ok(())
}
