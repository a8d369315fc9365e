use rand::Rng;

use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::nn::{Ctx, ParamStore};
use crate::ops::{Activation, Conv2dSpec};
use crate::tensor::Scalar;

/// Conv + BatchNorm + SiLU. The kernel is odd with "same" padding, so only
/// the stride changes the spatial extent. The conv carries no bias since
/// batch norm's shift subsumes it.
#[derive(Clone, Debug, PartialEq)]
pub struct CbsParams {
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl CbsParams {
    pub fn new(prefix: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        assert!(kernel % 2 == 1, "CBS kernel must be odd");
        Self {
            prefix: prefix.into(),
            cin,
            cout,
            kernel,
            stride,
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.init_conv(
            &format!("{}.conv", self.prefix),
            [self.cout, self.cin, self.kernel, self.kernel],
            false,
            rng,
        );
        store.init_batch_norm(&format!("{}.bn", self.prefix), self.cout);
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.graph.dims(x)[1];
        if c != self.cin {
            return Err(shape_err!("{}: expected {} channels, got {c}", self.prefix, self.cin));
        }
        let y = ctx.conv(
            &format!("{}.conv", self.prefix),
            x,
            Conv2dSpec::same(self.kernel, self.stride),
            false,
        )?;
        let y = ctx.batch_norm(&format!("{}.bn", self.prefix), y)?;
        Ok(ctx.graph.activation(y, Activation::Silu))
    }
}

/// Efficient layer aggregation: two 1×1 entry branches, a chain of 3×3 pairs
/// on the second branch, concatenation of both entries and every pair's
/// output, and a 1×1 fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct ElanParams {
    pub prefix: String,
    pub cin: usize,
    pub hidden: usize,
    pub cout: usize,
    pub entry: [CbsParams; 2],
    pub chain: Vec<[CbsParams; 2]>,
    pub fuse: CbsParams,
}

impl ElanParams {
    /// Two entry branches and two chained pairs; hidden width `cin / 2`.
    pub fn new(prefix: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::with_shape(prefix, cin, (cin / 2).max(1), cout, 2)
    }

    pub fn with_shape(
        prefix: impl Into<String>,
        cin: usize,
        hidden: usize,
        cout: usize,
        pairs: usize,
    ) -> Self {
        let prefix = prefix.into();
        let entry = [
            CbsParams::new(format!("{prefix}.entry0"), cin, hidden, 1, 1),
            CbsParams::new(format!("{prefix}.entry1"), cin, hidden, 1, 1),
        ];
        let chain = (0..pairs)
            .map(|i| {
                [
                    CbsParams::new(format!("{prefix}.pair{i}.a"), hidden, hidden, 3, 1),
                    CbsParams::new(format!("{prefix}.pair{i}.b"), hidden, hidden, 3, 1),
                ]
            })
            .collect();
        let concat = hidden * (2 + pairs);
        let fuse = CbsParams::new(format!("{prefix}.fuse"), concat, cout, 1, 1);
        Self {
            prefix,
            cin,
            hidden,
            cout,
            entry,
            chain,
            fuse,
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for b in self.entry.iter().chain(self.chain.iter().flatten()) {
            b.init(store, rng);
        }
        self.fuse.init(store, rng);
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut maps = vec![
            self.entry[0].forward(ctx, x)?,
            self.entry[1].forward(ctx, x)?,
        ];
        let mut cur = maps[1];
        for [a, b] in &self.chain {
            cur = a.forward(ctx, cur)?;
            cur = b.forward(ctx, cur)?;
            maps.push(cur);
        }
        let cat = ctx.graph.concat_channels(&maps)?;
        self.fuse.forward(ctx, cat)
    }
}

/// Max-pool + conv downsampling: a pooled branch (2×2 max pool, 1×1 CBS)
/// beside a conv branch (1×1 CBS, stride-2 3×3 CBS), concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcmParams {
    pub prefix: String,
    pub cin: usize,
    pub branch: usize,
    pub pool_conv: CbsParams,
    pub reduce: CbsParams,
    pub down: CbsParams,
}

impl MpcmParams {
    pub fn new(prefix: impl Into<String>, cin: usize, branch: usize) -> Self {
        let prefix = prefix.into();
        Self {
            pool_conv: CbsParams::new(format!("{prefix}.pool_conv"), cin, branch, 1, 1),
            reduce: CbsParams::new(format!("{prefix}.reduce"), cin, branch, 1, 1),
            down: CbsParams::new(format!("{prefix}.down"), branch, branch, 3, 2),
            prefix,
            cin,
            branch,
        }
    }

    pub fn cout(&self) -> usize {
        2 * self.branch
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.pool_conv.init(store, rng);
        self.reduce.init(store, rng);
        self.down.init(store, rng);
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = ctx.graph.dims(x);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("{}: spatial dims {h}x{w} must be even", self.prefix));
        }
        let pooled = ctx.graph.max_pool2d(x, (2, 2), (2, 2))?;
        let pooled = self.pool_conv.forward(ctx, pooled)?;
        let conv = self.reduce.forward(ctx, x)?;
        let conv = self.down.forward(ctx, conv)?;
        ctx.graph.concat_channels(&[pooled, conv])
    }
}
