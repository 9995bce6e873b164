//! Adam with bias correction and L2 weight decay folded into the gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub weight_decay: f64,
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: default_eps(), weight_decay: 1e-6 }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One Adam update of every parameter in place.
pub fn adam_step(params: &mut ModelParams, grads: &[Vec<f64>], state: &mut AdamState, lr: f64, hyper: &AdamHyper) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (((param, grad), m), v) in params.tensors_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if grad.len() != param.len() {
            return Err(Error::InvalidArgument("adam: gradient length differs from parameter".into()));
        }
        for (((w, &g), m), v) in param.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g + hyper.weight_decay * *w;
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}
