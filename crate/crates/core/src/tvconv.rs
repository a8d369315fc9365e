//! Translation-variant convolution and the compensation block.
//!
//! A learnable map `A` runs through a small conv generator (four
//! Conv+LN+ReLU stages and a final conv, all 3×3) that emits one depthwise
//! `K×K` kernel per channel for every spatial position. The kernels depend
//! only on parameters, never on the feature map they are applied to.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::nn::{Ctx, ElanParams, MpcmParams, ParamKind, ParamStore};
use crate::ops::{Activation, Conv2dSpec};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TvConvParams {
    pub prefix: String,
    pub channels: usize,
    pub affine_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    /// Spatial dims `(H_f, W_f)` of the learnable map.
    pub map: (usize, usize),
}

pub const GENERATOR_STAGES: usize = 4;

impl TvConvParams {
    pub fn new(prefix: impl Into<String>, channels: usize, map: (usize, usize)) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
            affine_channels: 8,
            hidden: 32,
            kernel: 3,
            map,
        }
    }

    pub fn affine_name(&self) -> String {
        format!("{}.affine", self.prefix)
    }

    pub fn head_name(&self) -> String {
        format!("{}.gen_out", self.prefix)
    }

    fn stage(&self, i: usize) -> String {
        format!("{}.gen{i}", self.prefix)
    }

    pub fn kernel_channels(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let (h, w) = self.map;
        store.insert(
            self.affine_name(),
            Tensor::randn([1, self.affine_channels, h, w], 0.1, rng),
            ParamKind::Trainable,
        );
        let mut cin = self.affine_channels;
        for i in 0..GENERATOR_STAGES {
            store.init_conv(&format!("{}.conv", self.stage(i)), [self.hidden, cin, 3, 3], true, rng);
            store.init_layer_norm(&format!("{}.ln", self.stage(i)), self.hidden);
            cin = self.hidden;
        }
        store.init_conv(&self.head_name(), [self.kernel_channels(), cin, 3, 3], true, rng);
    }

    /// Per-position kernels `(1, C·K·K, h, w)`. At a resolution other than
    /// the map's own, `A` is bilinearly resized first.
    pub fn generate_weights<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        size: (usize, usize),
    ) -> Result<Var> {
        let a = ctx.param(&self.affine_name())?;
        let [_, ca, ..] = ctx.graph.dims(a);
        if ca != self.affine_channels {
            return Err(shape_err!(
                "{}: map has {ca} channels, generator expects {}",
                self.prefix,
                self.affine_channels
            ));
        }
        let mut y = ctx.graph.resize_bilinear(a, size.0, size.1)?;
        for i in 0..GENERATOR_STAGES {
            y = ctx.conv(&format!("{}.conv", self.stage(i)), y, Conv2dSpec::same(3, 1), true)?;
            y = ctx.layer_norm(&format!("{}.ln", self.stage(i)), y)?;
            y = ctx.graph.activation(y, Activation::Relu);
        }
        ctx.conv(&self.head_name(), y, Conv2dSpec::same(3, 1), true)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let [_, c, h, w] = ctx.graph.dims(x);
        if c != self.channels {
            return Err(shape_err!("{}: expected {} channels, got {c}", self.prefix, self.channels));
        }
        let kernels = self.generate_weights(ctx, (h, w))?;
        ctx.graph.position_conv(x, kernels, self.kernel)
    }
}

impl<T: Scalar> Graph<T> {
    /// Depthwise convolution whose `k×k` kernel varies with position:
    /// `out(n,c,y,x) = Σ in(n,c,y+i−k/2,x+j−k/2) · ker(0, (c·k+i)·k+j, y, x)`,
    /// zero padded.
    pub fn position_conv(&mut self, x: Var, kernels: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims(x);
        let kd = self.dims(kernels);
        if kd != [1, c * k * k, h, w] {
            return Err(shape_err!(
                "kernels {:?} do not match input {:?} with k={k}",
                kd,
                [n, c, h, w]
            ));
        }
        let hw = h * w;
        let half = (k / 2) as isize;
        let taps: Vec<(usize, isize, isize)> = (0..k * k)
            .map(|t| (t, (t / k) as isize - half, (t % k) as isize - half))
            .collect();
        let mut out = Tensor::zeros([n, c, h, w]);
        {
            let xs = self.value(x).data();
            let ks = self.value(kernels).data();
            let o = out.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let plane = (b * c + ch) * hw;
                    for &(t, dy, dx) in &taps {
                        let kp = &ks[(ch * k * k + t) * hw..][..hw];
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for xx in 0..w {
                                let sx = xx as isize + dx;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let i = plane + y * w + xx;
                                o[i] = o[i] + xs[plane + sy as usize * w + sx as usize] * kp[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
        let (xv, kv) = (self.shared(x), self.shared(kernels));
        Ok(self.push("position_conv", out, vec![x, kernels], move || {
            Box::new(move |g: &Tensor<T>, needs: &[bool]| {
                let gd = g.data();
                let xs = xv.data();
                let ks = kv.data();
                let mut dx = needs[0].then(|| Tensor::zeros([n, c, h, w]));
                let mut dk = needs[1].then(|| Tensor::zeros(kd));
                for b in 0..n {
                    for ch in 0..c {
                        let plane = (b * c + ch) * hw;
                        for &(t, oy, ox) in &taps {
                            let kofs = (ch * k * k + t) * hw;
                            for y in 0..h {
                                let sy = y as isize + oy;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for xx in 0..w {
                                    let sx = xx as isize + ox;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let gi = gd[plane + y * w + xx];
                                    let si = plane + sy as usize * w + sx as usize;
                                    if let Some(dx) = dx.as_mut() {
                                        let d = dx.data_mut();
                                        d[si] = d[si] + gi * ks[kofs + y * w + xx];
                                    }
                                    if let Some(dk) = dk.as_mut() {
                                        let d = dk.data_mut();
                                        d[kofs + y * w + xx] = d[kofs + y * w + xx] + gi * xs[si];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![dx, dk]
            })
        }))
    }
}

/// Final stage of the compensation block: translation-variant conv, or a
/// standard depthwise 3×3 conv when it is ablated.
#[derive(Clone, Debug, PartialEq)]
pub enum CbTail {
    TranslationVariant(TvConvParams),
    Depthwise { prefix: String, channels: usize },
}

/// Three MPCM + ELAN stages (spatial /8), then the tail.
#[derive(Clone, Debug, PartialEq)]
pub struct CbParams {
    pub mpcm: [MpcmParams; 3],
    pub elan: [ElanParams; 3],
    pub tail: CbTail,
}

impl CbParams {
    /// `map` is the spatial size of the tail's input.
    pub fn new(prefix: &str, cin: usize, cout: usize, map: (usize, usize), variant: bool) -> Self {
        let mpcm0 = MpcmParams::new(format!("{prefix}.mpcm0"), cin, cin / 2);
        let elan0 = ElanParams::new(format!("{prefix}.elan0"), mpcm0.cout(), cout);
        let mpcm1 = MpcmParams::new(format!("{prefix}.mpcm1"), cout, cout / 2);
        let elan1 = ElanParams::new(format!("{prefix}.elan1"), mpcm1.cout(), cout);
        let mpcm2 = MpcmParams::new(format!("{prefix}.mpcm2"), cout, cout / 2);
        let elan2 = ElanParams::new(format!("{prefix}.elan2"), mpcm2.cout(), cout);
        let tail = if variant {
            CbTail::TranslationVariant(TvConvParams::new(format!("{prefix}.tvconv"), cout, map))
        } else {
            CbTail::Depthwise {
                prefix: format!("{prefix}.dwconv"),
                channels: cout,
            }
        };
        Self {
            mpcm: [mpcm0, mpcm1, mpcm2],
            elan: [elan0, elan1, elan2],
            tail,
        }
    }

    pub fn cout(&self) -> usize {
        self.elan[2].cout
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for (m, e) in self.mpcm.iter().zip(&self.elan) {
            m.init(store, rng);
            e.init(store, rng);
        }
        match &self.tail {
            CbTail::TranslationVariant(tv) => tv.init(store, rng),
            CbTail::Depthwise { prefix, channels } => {
                store.init_conv(prefix, [*channels, 1, 3, 3], true, rng)
            }
        }
    }

    /// Output of the third ELAN, i.e. the tail's input.
    pub fn trunk<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = ctx.graph.dims(x);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(shape_err!("compensation block input {h}x{w} not divisible by 8"));
        }
        let mut y = x;
        for (m, e) in self.mpcm.iter().zip(&self.elan) {
            y = m.forward(ctx, y)?;
            y = e.forward(ctx, y)?;
        }
        Ok(y)
    }

    pub fn tail<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match &self.tail {
            CbTail::TranslationVariant(tv) => tv.forward(ctx, x),
            CbTail::Depthwise { prefix, channels } => ctx.conv(
                prefix,
                x,
                Conv2dSpec::same(3, 1).with_groups(*channels),
                true,
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.trunk(ctx, x)?;
        self.tail(ctx, y)
    }
}
