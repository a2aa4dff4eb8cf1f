//! SGD with classical momentum: `v ← μ·v + g`, `p ← p − lr·v`.

use crate::error::{Error, Result};
use crate::tensor::{shape_str, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub momentum: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub velocity: Vec<Tensor>,
    pub learning_rate: f32,
    pub momentum: f32,
}

impl OptState {
    pub fn new<'a>(config: SgdConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        OptState {
            velocity: shapes.into_iter().map(Tensor::zeros).collect(),
            learning_rate: config.learning_rate,
            momentum: config.momentum,
        }
    }
}

pub fn sgd_momentum_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut OptState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::shape(
            format!("{} parameter tensors", state.velocity.len()),
            format!("{} params / {} grads", params.len(), grads.len()),
        ));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(
                shape_str(v.shape()),
                format!("param {} / grad {}", shape_str(p.shape()), shape_str(g.shape())),
            ));
        }
    }
    let (lr, mu) = (state.learning_rate, state.momentum);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
