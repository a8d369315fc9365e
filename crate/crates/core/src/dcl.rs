//! Dynamic convolutional layer and block.
//!
//! The layer derives a multiplicative weight map from its own input:
//! a spatial context term (3×3 conv) plus a channel context term (global
//! average pool followed by a width-3 conv sliding along the channel axis)
//! broadcast over H×W, refined by a 1×1 conv. The map multiplies the input
//! elementwise, so its dims equal the input dims.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::nn::{CbsParams, Ctx, ParamStore};
use crate::ops::{Activation, Conv2dSpec};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct DclParams {
    pub prefix: String,
    pub channels: usize,
    /// Squash the dynamic weights through a sigmoid. Off by default.
    pub gate: bool,
}

impl DclParams {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
            gate: false,
        }
    }

    pub fn sce_name(&self) -> String {
        format!("{}.sce", self.prefix)
    }

    pub fn cce_name(&self) -> String {
        format!("{}.cce", self.prefix)
    }

    pub fn fuse_name(&self) -> String {
        format!("{}.fuse", self.prefix)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let c = self.channels;
        store.init_conv(&self.sce_name(), [c, c, 3, 3], true, rng);
        store.init_conv(&self.cce_name(), [1, 1, 3, 1], false, rng);
        store.init_conv(&self.fuse_name(), [c, c, 1, 1], true, rng);
    }

    fn check(&self, ctx: &Ctx<'_, impl Scalar>, x: Var) -> Result<()> {
        let c = ctx.graph.dims(x)[1];
        if c != self.channels || c == 0 {
            return Err(shape_err!("{}: expected {} channels, got {c}", self.prefix, self.channels));
        }
        Ok(())
    }

    /// Spatial context: 3×3 conv, pad 1.
    pub fn sce<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.check(ctx, x)?;
        ctx.conv(&self.sce_name(), x, Conv2dSpec::same(3, 1), true)
    }

    /// Channel context `(N, C, 1, 1)`: pooled channel vector convolved with a
    /// zero-padded width-3 kernel along the channel axis.
    pub fn cce<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.check(ctx, x)?;
        let n = ctx.graph.dims(x)[0];
        let c = self.channels;
        let pooled = ctx.graph.global_avg_pool(x)?;
        let column = ctx.graph.reshape(pooled, [n, 1, c, 1])?;
        let spec = Conv2dSpec {
            pad: (1, 0),
            ..Default::default()
        };
        let mixed = ctx.conv(&self.cce_name(), column, spec, false)?;
        ctx.graph.reshape(mixed, [n, c, 1, 1])
    }

    /// Input-conditioned weight map with the input's dims.
    pub fn dynamic_weights<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let spatial = self.sce(ctx, x)?;
        let channel = self.cce(ctx, x)?;
        let context = ctx.graph.add(spatial, channel)?;
        let w = ctx.conv(&self.fuse_name(), context, Conv2dSpec::default(), true)?;
        Ok(if self.gate {
            ctx.graph.activation(w, Activation::Sigmoid)
        } else {
            w
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = self.dynamic_weights(ctx, x)?;
        ctx.graph.mul(w, x)
    }
}

/// Third stage of the dynamic block: the dynamic layer, or a static 3×3
/// conv when the dynamic layer is ablated.
#[derive(Clone, Debug, PartialEq)]
pub enum DcbTail {
    Dynamic(DclParams),
    Static { prefix: String, channels: usize },
}

/// Two CBS stages followed by DCL + BatchNorm + SiLU.
#[derive(Clone, Debug, PartialEq)]
pub struct DcbParams {
    pub cbs1: CbsParams,
    pub cbs2: CbsParams,
    pub tail: DcbTail,
    pub bn_prefix: String,
}

impl DcbParams {
    /// `width` output channels; stride 1, 2, 1 across the three stages.
    pub fn new(prefix: &str, cin: usize, width: usize, dynamic: bool) -> Self {
        let half = (width / 2).max(1);
        let tail = if dynamic {
            DcbTail::Dynamic(DclParams::new(format!("{prefix}.dcl"), width))
        } else {
            DcbTail::Static {
                prefix: format!("{prefix}.static_conv"),
                channels: width,
            }
        };
        Self {
            cbs1: CbsParams::new(format!("{prefix}.cbs1"), cin, half, 3, 1),
            cbs2: CbsParams::new(format!("{prefix}.cbs2"), half, width, 3, 2),
            tail,
            bn_prefix: format!("{prefix}.dbs_bn"),
        }
    }

    pub fn cout(&self) -> usize {
        self.cbs2.cout
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.cbs1.init(store, rng);
        self.cbs2.init(store, rng);
        match &self.tail {
            DcbTail::Dynamic(d) => d.init(store, rng),
            DcbTail::Static { prefix, channels } => {
                store.init_conv(prefix, [*channels, *channels, 3, 3], false, rng)
            }
        }
        store.init_batch_norm(&self.bn_prefix, self.cout());
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.cbs1.forward(ctx, x)?;
        let y = self.cbs2.forward(ctx, y)?;
        let y = match &self.tail {
            DcbTail::Dynamic(d) => d.forward(ctx, y)?,
            DcbTail::Static { prefix, .. } => ctx.conv(prefix, y, Conv2dSpec::same(3, 1), false)?,
        };
        let y = ctx.batch_norm(&self.bn_prefix, y)?;
        Ok(ctx.graph.activation(y, Activation::Silu))
    }
}
