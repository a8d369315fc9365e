use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; persisted but never differentiated.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Named parameters in registration order. The order is the checkpoint
/// manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) {
        let name = name.into();
        let previous = self.entries.insert(name.clone(), Param { value, kind });
        assert!(previous.is_none(), "parameter `{name}` registered twice");
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    /// Replaces a value, keeping its dims contract.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has dims {:?}, got {:?}",
                slot.dims(),
                value.dims()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|p| p.kind)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(k, p)| (k, &p.value))
    }

    /// Total number of scalar entries over trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    // ---- initializers -------------------------------------------------

    /// Convolution weight `(cout, cin_g, kh, kw)` plus optional bias, both
    /// uniform in `±1/sqrt(fan_in)`.
    pub fn init_conv<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        dims: [usize; 4],
        bias: bool,
        rng: &mut R,
    ) {
        let fan_in = dims[1] * dims[2] * dims[3];
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.insert(
            format!("{prefix}.weight"),
            Tensor::uniform(dims, bound, rng),
            ParamKind::Trainable,
        );
        if bias {
            self.insert(
                format!("{prefix}.bias"),
                Tensor::uniform([dims[0], 1, 1, 1], bound, rng),
                ParamKind::Trainable,
            );
        }
    }

    /// Batch-norm affine (1, 0) and running statistics (0, 1).
    pub fn init_batch_norm(&mut self, prefix: &str, channels: usize) {
        let d = [channels, 1, 1, 1];
        self.insert(format!("{prefix}.weight"), Tensor::ones(d), ParamKind::Trainable);
        self.insert(format!("{prefix}.bias"), Tensor::zeros(d), ParamKind::Trainable);
        self.insert(format!("{prefix}.running_mean"), Tensor::zeros(d), ParamKind::Buffer);
        self.insert(format!("{prefix}.running_var"), Tensor::ones(d), ParamKind::Buffer);
    }

    pub fn init_layer_norm(&mut self, prefix: &str, channels: usize) {
        let d = [channels, 1, 1, 1];
        self.insert(format!("{prefix}.weight"), Tensor::ones(d), ParamKind::Trainable);
        self.insert(format!("{prefix}.bias"), Tensor::zeros(d), ParamKind::Trainable);
    }
}
