use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::dcl::{DcbParams, DcbTail};
use crate::error::{shape_err, Result};
use crate::mab::{MabParams, MirbParams};
use crate::model::config::ModelConfig;
use crate::nn::{Ctx, ParamStore};
use crate::ops::Conv2dSpec;
use crate::tensor::{Scalar, Tensor};
use crate::tvconv::{CbParams, CbTail};

pub const HEAD_PREFIX: &str = "head";
/// Initial objectness bias, so that fresh models emit few detections.
pub const OBJ_BIAS_INIT: f64 = -4.0;

/// Intermediate outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Stages {
    pub dcb: Var,
    pub mirb: Var,
    pub cb: Var,
    pub head: Var,
}

/// The full detector: dynamic block → mixed attention block →
/// compensation block → detection head, with its parameters.
#[derive(Clone, Debug)]
pub struct DtNetModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub dcb: DcbParams,
    pub mirb: MirbParams,
    pub cb: CbParams,
    pub params: ParamStore<T>,
}

impl<T: Scalar> DtNetModel<T> {
    /// Builds the topology for `config` and initializes parameters from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::topology(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.dcb.init(&mut model.params, &mut rng);
        model.mirb.init(&mut model.params, &mut rng);
        model.cb.init(&mut model.params, &mut rng);
        let c = model.cb.cout();
        let head = model.config.head_channels();
        model
            .params
            .init_conv(HEAD_PREFIX, [head, c, 1, 1], true, &mut rng);
        let bias = model.params.get_mut(&format!("{HEAD_PREFIX}.bias"))?;
        let per_anchor = model.config.anchor_channels();
        for (i, b) in bias.data_mut().iter_mut().enumerate() {
            *b = if i % per_anchor == 4 {
                T::lit(OBJ_BIAS_INIT)
            } else {
                T::zero()
            };
        }
        Ok(model)
    }

    /// Block descriptors with an empty parameter store.
    pub fn topology(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let [w0, w1, w2] = config.widths;
        let v = config.variant;
        let mut dcb = DcbParams::new("dcb", 3, w0, v.has_dcl());
        if let DcbTail::Dynamic(d) = &mut dcb.tail {
            d.gate = config.dcl_gate;
        }
        let mab = (v.has_mab() && config.mab_depth > 0).then(|| {
            let mut t = MabParams::new("mab", w1);
            t.heads = config.heads;
            t.window = config.window;
            t.alpha = config.alpha;
            t.mlp_ratio = config.mlp_ratio;
            t.reduction = config.reduction;
            (config.mab_depth, t)
        });
        let mirb = MirbParams::new("mirb", w0, w1, mab);
        let grid = config.grid();
        let mut cb = CbParams::new("cb", w1, w2, grid, v.has_tvconv());
        if let CbTail::TranslationVariant(tv) = &mut cb.tail {
            tv.affine_channels = config.tv_affine_channels;
            tv.hidden = config.tv_hidden;
        }
        Ok(Self {
            config,
            dcb,
            mirb,
            cb,
            params: ParamStore::new(),
        })
    }

    pub fn head<U: Scalar>(&self, ctx: &mut Ctx<'_, U>, x: Var) -> Result<Var> {
        ctx.conv(HEAD_PREFIX, x, Conv2dSpec::default(), true)
    }

    pub fn forward_stages(&self, ctx: &mut Ctx<'_, T>, input: Var) -> Result<Stages> {
        let [_, c, h, w] = ctx.graph.dims(input);
        if c != 3 {
            return Err(shape_err!("expected 3 input channels, got {c}"));
        }
        let s = self.config.head_stride;
        if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(shape_err!("input {h}x{w} not divisible by {s}"));
        }
        let dcb = self.dcb.forward(ctx, input)?;
        let mirb = self.mirb.forward(ctx, dcb)?;
        let cb = self.cb.forward(ctx, mirb)?;
        let head = self.head(ctx, cb)?;
        Ok(Stages {
            dcb,
            mirb,
            cb,
            head,
        })
    }

    /// Raw head map `(N, A·(5+classes), H/32, W/32)`.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, input: Var) -> Result<Var> {
        Ok(self.forward_stages(ctx, input)?.head)
    }

    /// Inference-mode forward of a batch of images.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ctx = Ctx::inference(&self.params);
        let x = ctx.input(images.clone());
        let y = self.forward(&mut ctx, x)?;
        Ok(ctx.value(y).clone())
    }

    pub fn cast<U: Scalar>(&self) -> DtNetModel<U> {
        DtNetModel {
            config: self.config.clone(),
            dcb: self.dcb.clone(),
            mirb: self.mirb.clone(),
            cb: self.cb.clone(),
            params: self.params.cast(),
        }
    }
}
