//! Mixed attention: a channel-attention gate and non-overlapping window
//! self-attention, run in parallel inside a pre-norm transformer block.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::{CbsParams, Ctx, ElanParams, ParamKind, ParamStore};
use crate::ops::{Activation, Conv2dSpec};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MabParams {
    pub prefix: String,
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    /// Channel-attention squeeze ratio.
    pub reduction: usize,
    /// Weight of the channel-attention branch.
    pub alpha: f64,
}

impl MabParams {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
            heads: 4,
            window: 8,
            mlp_ratio: 2,
            reduction: 16,
            alpha: 0.01,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if self.heads == 0 || c % self.heads != 0 {
            return Err(Error::Config(format!(
                "{}: {c} channels not divisible by {} heads",
                self.prefix, self.heads
            )));
        }
        if self.reduction == 0 || c % self.reduction != 0 {
            return Err(Error::Config(format!(
                "{}: {c} channels not divisible by reduction {}",
                self.prefix, self.reduction
            )));
        }
        if self.window == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(format!("{}: window and mlp ratio must be positive", self.prefix)));
        }
        Ok(())
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let c = self.channels;
        let squeeze = c / self.reduction;
        store.init_layer_norm(&self.name("ln1"), c);
        store.init_layer_norm(&self.name("ln2"), c);
        store.init_conv(&self.name("cab.squeeze"), [squeeze, c, 1, 1], true, rng);
        store.init_conv(&self.name("cab.excite"), [c, squeeze, 1, 1], true, rng);
        let bound = 1.0 / (c as f64).sqrt();
        for proj in ["q", "k", "v", "o"] {
            store.insert(
                self.name(&format!("attn.{proj}.weight")),
                Tensor::uniform([1, 1, c, c], bound, rng),
                ParamKind::Trainable,
            );
            store.insert(
                self.name(&format!("attn.{proj}.bias")),
                Tensor::uniform([1, 1, 1, c], bound, rng),
                ParamKind::Trainable,
            );
        }
        let hidden = c * self.mlp_ratio;
        store.init_conv(&self.name("mlp.fc1"), [hidden, c, 1, 1], true, rng);
        store.init_conv(&self.name("mlp.fc2"), [c, hidden, 1, 1], true, rng);
    }

    fn check(&self, ctx: &Ctx<'_, impl Scalar>, x: Var) -> Result<()> {
        self.validate()?;
        let c = ctx.graph.dims(x)[1];
        if c != self.channels {
            return Err(shape_err!("{}: expected {} channels, got {c}", self.prefix, self.channels));
        }
        Ok(())
    }

    /// Sigmoid gate `(N, C, 1, 1)` from squeeze → ReLU → excite.
    pub fn channel_gate<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.check(ctx, x)?;
        let pooled = ctx.graph.global_avg_pool(x)?;
        let s = ctx.conv(&self.name("cab.squeeze"), pooled, Conv2dSpec::default(), true)?;
        let s = ctx.graph.activation(s, Activation::Relu);
        let e = ctx.conv(&self.name("cab.excite"), s, Conv2dSpec::default(), true)?;
        Ok(ctx.graph.activation(e, Activation::Sigmoid))
    }

    pub fn channel_attention<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = self.channel_gate(ctx, x)?;
        ctx.graph.mul(x, g)
    }

    /// `tokens · W + b` for tokens `(1, 1, M, C)`.
    fn project<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, tokens: Var, proj: &str) -> Result<Var> {
        let w = ctx.param(&self.name(&format!("attn.{proj}.weight")))?;
        let b = ctx.param(&self.name(&format!("attn.{proj}.bias")))?;
        let y = ctx.graph.matmul(tokens, w)?;
        ctx.graph.add(y, b)
    }

    /// Window self-attention; also returns the attention probabilities
    /// `(windows, heads, T, T)`.
    pub fn window_msa_with_attention<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
    ) -> Result<(Var, Var)> {
        self.check(ctx, x)?;
        let [n, c, h, w] = ctx.graph.dims(x);
        let win = self.window;
        let (ph, pw) = ((win - h % win) % win, (win - w % win) % win);
        let padded = if ph + pw > 0 {
            ctx.graph.pad2d(x, (ph / 2, ph - ph / 2, pw / 2, pw - pw / 2))
        } else {
            x
        };
        let (hp, wp) = (h + ph, w + pw);
        let tokens = ctx.graph.window_partition(padded, win)?;
        let windows = ctx.graph.dims(tokens)[0];
        let t = win * win;
        let heads = self.heads;
        let d = c / heads;
        let flat = ctx.graph.reshape(tokens, [1, 1, windows * t, c])?;

        let split = |ctx: &mut Ctx<'_, T>, proj: &str| -> Result<Var> {
            let p = self.project(ctx, flat, proj)?;
            let p = ctx.graph.reshape(p, [windows, t, heads, d])?;
            ctx.graph.permute(p, [0, 2, 1, 3])
        };
        let q = split(ctx, "q")?;
        let k = split(ctx, "k")?;
        let v = split(ctx, "v")?;

        let scores = ctx.graph.bmm(q, k, false, true)?;
        let scores = ctx.graph.scale(scores, T::lit(1.0 / (d as f64).sqrt()));
        let attn = ctx.graph.softmax_last(scores);
        let mixed = ctx.graph.bmm(attn, v, false, false)?;
        let mixed = ctx.graph.permute(mixed, [0, 2, 1, 3])?;
        let mixed = ctx.graph.reshape(mixed, [1, 1, windows * t, c])?;
        let out = self.project(ctx, mixed, "o")?;
        let out = ctx.graph.reshape(out, [windows, 1, t, c])?;
        let merged = ctx.graph.window_merge(out, [n, c, hp, wp], win)?;
        let y = if ph + pw > 0 {
            ctx.graph.crop2d(merged, ph / 2, pw / 2, h, w)?
        } else {
            merged
        };
        Ok((y, attn))
    }

    pub fn window_msa<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(self.window_msa_with_attention(ctx, x)?.0)
    }

    pub fn mlp<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = ctx.conv(&self.name("mlp.fc1"), x, Conv2dSpec::default(), true)?;
        let y = ctx.graph.activation(y, Activation::Silu);
        ctx.conv(&self.name("mlp.fc2"), y, Conv2dSpec::default(), true)
    }

    /// `y = x + α·CA(LN1 x) + WMSA(LN1 x)`, then `y + MLP(LN2 y)`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.check(ctx, x)?;
        let normed = ctx.layer_norm(&self.name("ln1"), x)?;
        let ca = self.channel_attention(ctx, normed)?;
        let ca = ctx.graph.scale(ca, T::lit(self.alpha));
        let sa = self.window_msa(ctx, normed)?;
        let y = ctx.graph.add(x, ca)?;
        let y = ctx.graph.add(y, sa)?;
        let normed2 = ctx.layer_norm(&self.name("ln2"), y)?;
        let m = self.mlp(ctx, normed2)?;
        ctx.graph.add(y, m)
    }
}

/// Stride-2 CBS, ELAN, then `depth` mixed attention blocks (none when the
/// attention is ablated).
#[derive(Clone, Debug, PartialEq)]
pub struct MirbParams {
    pub cbs: CbsParams,
    pub elan: ElanParams,
    pub mab: Vec<MabParams>,
}

impl MirbParams {
    pub fn new(prefix: &str, cin: usize, cout: usize, mab: Option<(usize, MabParams)>) -> Self {
        let mab = match mab {
            Some((depth, template)) => (0..depth)
                .map(|i| MabParams {
                    prefix: format!("{prefix}.mab{i}"),
                    channels: cout,
                    ..template.clone()
                })
                .collect(),
            None => Vec::new(),
        };
        Self {
            cbs: CbsParams::new(format!("{prefix}.cbs"), cin, cin, 3, 2),
            elan: ElanParams::new(format!("{prefix}.elan"), cin, cout),
            mab,
        }
    }

    pub fn cout(&self) -> usize {
        self.elan.cout
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.cbs.init(store, rng);
        self.elan.init(store, rng);
        for m in &self.mab {
            m.init(store, rng);
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.cbs.forward(ctx, x)?;
        y = self.elan.forward(ctx, y)?;
        for m in &self.mab {
            y = m.forward(ctx, y)?;
        }
        Ok(y)
    }
}
