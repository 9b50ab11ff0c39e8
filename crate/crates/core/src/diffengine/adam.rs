use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

/// First/second moment estimates and step counter for Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    if !params.same_layout(grads) {
        return Err(Error::Invalid("gradients are not keyed like the parameters".into()));
    }
    if state.m.len() != params.len()
        || params
            .iter()
            .zip(&state.m)
            .any(|((_, p), m)| p.shape() != m.shape())
    {
        return Err(Error::Invalid("optimizer state does not match the parameters".into()));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (((_, p), (_, g)), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for idx in 0..p.len() {
            m[idx] = b1 * m[idx] + (1.0 - b1) * g[idx];
            v[idx] = b2 * v[idx] + (1.0 - b2) * g[idx] * g[idx];
            let mhat = m[idx] / c1;
            let vhat = v[idx] / c2;
            p[idx] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}
