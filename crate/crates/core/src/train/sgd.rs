//! Synchronous SGD with momentum:
//! `buffer <- mu * buffer + grad; param <- param - lr * buffer`.

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::scalar::Float;

/// Momentum buffers (one per parameter array, mirroring the model shapes)
/// plus the step counter.
pub struct OptimizerState<F: Float> {
    pub momentum: ModelState<F>,
    pub mu: F,
    pub step: u64,
}

impl<F: Float> OptimizerState<F> {
    pub fn new(state: &ModelState<F>, mu: f64) -> Self {
        OptimizerState {
            momentum: state.zeros_like(),
            mu: F::from_f64(mu),
            step: 0,
        }
    }
}

/// One update over matching flat parameter/gradient/buffer views.
pub fn sgd_step<F: Float>(
    params: &mut [&mut [F]],
    grads: &[&[F]],
    buffers: &mut [&mut [F]],
    mu: F,
    lr: F,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != buffers.len() {
        return Err(Error::Shape("parameter/gradient/buffer trees differ".into()));
    }
    for ((p, g), b) in params.iter_mut().zip(grads.iter()).zip(buffers.iter_mut()) {
        if p.len() != g.len() || p.len() != b.len() {
            return Err(Error::Shape("array length mismatch in sgd_step".into()));
        }
        for i in 0..p.len() {
            if !g[i].is_finite() {
                return Err(Error::NonFinite("gradients".into()));
            }
            b[i] = mu * b[i] + g[i];
            p[i] = p[i] - lr * b[i];
        }
    }
    Ok(())
}
