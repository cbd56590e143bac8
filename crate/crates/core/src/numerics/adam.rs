use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { step: 0, m: zeros(), v: zeros(), config }
    }
}

/// One bias-corrected Adam update. Fails before touching anything if the
/// shapes disagree or the update would produce a non-finite parameter.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape(format!(
                "adam: param {:?}, grad {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step + 1;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);

    let mut next = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let mut np = p.data().to_vec();
        let mut nm = state.m[i].data().to_vec();
        let mut nv = state.v[i].data().to_vec();
        for k in 0..np.len() {
            let gk = g.data()[k];
            nm[k] = beta1 * nm[k] + (1.0 - beta1) * gk;
            nv[k] = beta2 * nv[k] + (1.0 - beta2) * gk * gk;
            let mhat = nm[k] / bc1;
            let vhat = nv[k] / bc2;
            np[k] -= lr * mhat / (vhat.sqrt() + eps);
        }
        check_finite("adam_step", &np)?;
        next.push((np, nm, nv));
    }
    for (i, (np, nm, nv)) in next.into_iter().enumerate() {
        params[i].data_mut().copy_from_slice(&np);
        state.m[i].data_mut().copy_from_slice(&nm);
        state.v[i].data_mut().copy_from_slice(&nv);
    }
    state.step = t;
    Ok(())
}
