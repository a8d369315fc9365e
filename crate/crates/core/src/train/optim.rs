//! SGD with momentum and L2 weight decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.937,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState<T: Scalar = f32> {
    pub config: SgdConfig,
    pub velocity: HashMap<String, Tensor<T>>,
    pub step: usize,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: HashMap::new(),
            step: 0,
        }
    }
}

/// `v ← μv + g + λw; w ← w − lr·v` for every named gradient.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[(String, Tensor<T>)],
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    let mu = T::lit(state.config.momentum);
    let wd = T::lit(state.config.weight_decay);
    let lr = T::lit(lr);
    for (name, g) in grads {
        let w = params.get_mut(name)?;
        if w.dims() != g.dims() {
            return Err(shape_err!("gradient {:?} for {name} {:?}", g.dims(), w.dims()));
        }
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.dims()));
        for ((v, &g), w) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut()) {
            *v = mu * *v + g + wd * *w;
            *w = *w - lr * *v;
        }
    }
    state.step += 1;
    Ok(())
}
