use std::collections::HashMap;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::Result;
use crate::nn::params::{ParamKind, ParamStore};
use crate::ops::{BatchNormStats, Conv2dSpec, Mode, NORM_EPS};
use crate::tensor::{Scalar, Tensor};

/// One forward evaluation: the tape, the parameters it reads, and the
/// running-statistic updates produced by batch norm in train mode.
pub struct Ctx<'p, T: Scalar> {
    pub graph: Graph<T>,
    params: &'p ParamStore<T>,
    vars: HashMap<String, Var>,
    mode: Mode,
    bn_updates: Vec<(String, BatchNormStats<T>)>,
}

impl<'p, T: Scalar> Ctx<'p, T> {
    /// Tracks gradients for every parameter that is read.
    pub fn training(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Self::with_graph(Graph::new(), params, mode)
    }

    /// Records values only.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self::with_graph(Graph::inference(), params, Mode::Infer)
    }

    pub fn with_graph(graph: Graph<T>, params: &'p ParamStore<T>, mode: Mode) -> Self {
        Self {
            graph,
            params,
            vars: HashMap::new(),
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Tape node for a named parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let v = match self.params.kind(name) {
            Some(ParamKind::Trainable) => self.graph.leaf(value),
            _ => self.graph.constant(value),
        };
        self.vars.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    pub fn conv(&mut self, prefix: &str, x: Var, spec: Conv2dSpec, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = if bias {
            Some(self.param(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        self.graph.conv2d(x, w, b, spec)
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let scale = self.param(&format!("{prefix}.weight"))?;
        let shift = self.param(&format!("{prefix}.bias"))?;
        let stats = BatchNormStats {
            mean: self.params.get(&format!("{prefix}.running_mean"))?.clone(),
            var: self.params.get(&format!("{prefix}.running_var"))?.clone(),
        };
        let (y, updated) = self
            .graph
            .batch_norm(x, scale, shift, self.mode, &stats, NORM_EPS)?;
        if let Some(u) = updated {
            self.bn_updates.push((prefix.to_owned(), u));
        }
        Ok(y)
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let scale = self.param(&format!("{prefix}.weight"))?;
        let shift = self.param(&format!("{prefix}.bias"))?;
        self.graph.layer_norm(x, scale, shift, NORM_EPS)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    /// Running-statistic updates produced so far, keyed by batch-norm prefix.
    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchNormStats<T>)> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradient for every trainable parameter (zeros for those not read).
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(String, Tensor<T>)> {
        self.params
            .trainable()
            .map(|(name, value)| {
                let g = self
                    .vars
                    .get(name)
                    .and_then(|&v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(value.dims()));
                (name.to_owned(), g)
            })
            .collect()
    }
}

/// Writes batch-norm running-statistic updates back into a store.
pub fn apply_bn_updates<T: Scalar>(
    store: &mut ParamStore<T>,
    updates: Vec<(String, BatchNormStats<T>)>,
) -> Result<()> {
    for (prefix, stats) in updates {
        store.set(&format!("{prefix}.running_mean"), stats.mean)?;
        store.set(&format!("{prefix}.running_var"), stats.var)?;
    }
    Ok(())
}
