use serde::{Deserialize, Serialize};

use super::AlignmentModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamaxState {
    /// First moments, one buffer per parameter tensor.
    pub m: Vec<Vec<f64>>,
    /// Exponentially weighted infinity norms.
    pub u: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamaxState {
    pub fn new(model: &AlignmentModel) -> Self {
        let shapes: Vec<Vec<f64>> = model
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.values.len()])
            .collect();
        Self {
            m: shapes.clone(),
            u: shapes,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adamax update on a flat buffer. `step` is the 1-based step index.
#[allow(clippy::too_many_arguments)]
pub fn adamax_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    u: &mut [f64],
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
) {
    let scale = lr / (1.0 - beta1.powi(step as i32));
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        u[i] = (beta2 * u[i]).max(g.abs());
        params[i] -= scale * m[i] / (u[i] + eps);
    }
}

pub fn adamax_step(
    model: &mut AlignmentModel,
    grads: &AlignmentModel,
    state: &mut AdamaxState,
    lr: f64,
) -> Result<()> {
    let g = grads.tensors();
    let mut p = model.tensors_mut();
    if p.len() != g.len() || p.len() != state.m.len() {
        return Err(Error::invalid("gradient and optimizer state do not match the model"));
    }
    state.step += 1;
    for (i, ((name, values), grad)) in p.iter_mut().zip(&g).enumerate() {
        if values.len() != grad.values.len() || values.len() != state.m[i].len() {
            return Err(Error::invalid(format!("shape mismatch for {name}")));
        }
        adamax_update(
            values,
            grad.values,
            &mut state.m[i],
            &mut state.u[i],
            state.step,
            state.beta1,
            state.beta2,
            state.eps,
            lr,
        );
    }
    Ok(())
}
