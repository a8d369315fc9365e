//! Central finite-difference verification of the analytic gradients, run
//! in 64-bit on small shapes.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::bbox::{BBox, GtBox};
use crate::dcl::DclParams;
use crate::error::Result;
use crate::mab::MabParams;
use crate::model::{DtNetModel, ModelConfig};
use crate::nn::{Ctx, ParamKind, ParamStore};
use crate::ops::{Activation, Conv2dSpec, Mode};
use crate::tensor::Tensor;
use crate::train::LossWeights;
use crate::tvconv::TvConvParams;

pub const FD_STEP: f64 = 1e-4;
/// Fallback step for coordinates whose first estimate straddles a kink.
pub const FD_FINE_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-3;
const REL_FLOOR: f64 = 1e-6;

type Objective = Box<dyn Fn(&mut Ctx<'_, f64>) -> Result<Var>>;

/// A scalar function of every trainable entry in `store`; inputs are
/// stored alongside parameters so they are checked too.
pub struct Problem {
    pub name: String,
    pub store: ParamStore<f64>,
    pub mode: Mode,
    pub objective: Objective,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockCheck {
    pub block: String,
    pub max_rel_err: f64,
    /// Name and flat index of the worst coordinate.
    pub worst: String,
    pub checked: usize,
}

impl BlockCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRAD_TOL
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate(p: &Problem) -> Result<f64> {
    let mut ctx = Ctx::with_graph(Graph::inference(), &p.store, p.mode);
    let out = (p.objective)(&mut ctx)?;
    Ok(ctx.value(out).data()[0])
}

fn central(p: &mut Problem, name: &str, i: usize, h: f64) -> Result<f64> {
    let orig = p.store.get(name)?.data()[i];
    p.store.get_mut(name)?.data_mut()[i] = orig + h;
    let plus = evaluate(p)?;
    p.store.get_mut(name)?.data_mut()[i] = orig - h;
    let minus = evaluate(p)?;
    p.store.get_mut(name)?.data_mut()[i] = orig;
    Ok((plus - minus) / (2.0 * h))
}

/// Compares backprop against central differences on up to `coords`
/// randomly chosen entries of every trainable tensor.
pub fn check_problem<R: Rng + ?Sized>(p: &mut Problem, coords: usize, rng: &mut R) -> Result<BlockCheck> {
    let analytic = {
        let mut ctx = Ctx::training(&p.store, p.mode);
        let out = (p.objective)(&mut ctx)?;
        let grads = ctx.graph.backward(out)?;
        ctx.param_grads(&grads)
    };
    let mut report = BlockCheck {
        block: p.name.clone(),
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (name, grad) in &analytic {
        let n = grad.numel();
        let picks: Vec<usize> = if n <= coords {
            (0..n).collect()
        } else {
            sample(rng, n, coords).into_vec()
        };
        for i in picks {
            let a = grad.data()[i];
            let mut err = rel_err(a, central(p, name, i, FD_STEP)?);
            if err > GRAD_TOL {
                err = err.min(rel_err(a, central(p, name, i, FD_FINE_STEP)?));
            }
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = err;
                report.worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}

fn input(store: &mut ParamStore<f64>, name: &str, dims: [usize; 4], rng: &mut ChaCha8Rng) {
    store.insert(name, Tensor::randn(dims, 1.0, rng), ParamKind::Trainable);
}

/// Replaces every trainable entry by a random draw so that identity
/// initializations (unit scales, zero shifts) do not hide errors.
fn perturb_all(store: &mut ParamStore<f64>, scale: f64, rng: &mut ChaCha8Rng) {
    for (_, p) in store.iter_mut() {
        if p.kind == ParamKind::Trainable {
            let noise = Tensor::<f64>::randn(p.value.dims(), scale, rng);
            p.value.add_assign(&noise);
        }
    }
}

/// `Σ out ⊙ r` for a fixed random `r`.
fn probe(ctx: &mut Ctx<'_, f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    ctx.graph.weighted_sum(out, r.clone())
}

fn probe_for(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(dims, 1.0, rng)
}

fn conv_problem(rng: &mut ChaCha8Rng) -> Problem {
    let mut store = ParamStore::new();
    input(&mut store, "input", [2, 4, 7, 7], rng);
    store.init_conv("conv", [6, 2, 3, 3], true, rng);
    perturb_all(&mut store, 0.1, rng);
    let spec = Conv2dSpec {
        stride: (2, 2),
        pad: (1, 1),
        groups: 2,
    };
    let r = probe_for([2, 6, 4, 4], rng);
    Problem {
        name: "conv2d".into(),
        store,
        mode: Mode::Train,
        objective: Box::new(move |ctx| {
            let x = ctx.param("input")?;
            let y = ctx.conv("conv", x, spec, true)?;
            probe(ctx, y, &r)
        }),
    }
}

fn normalize_problem(rng: &mut ChaCha8Rng) -> Problem {
    let mut store = ParamStore::new();
    input(&mut store, "input", [3, 3, 4, 4], rng);
    input(&mut store, "tokens", [2, 5, 3, 3], rng);
    store.init_batch_norm("bn", 3);
    store.init_layer_norm("ln", 5);
    perturb_all(&mut store, 0.3, rng);
    let r1 = probe_for([3, 3, 4, 4], rng);
    let r2 = probe_for([2, 5, 3, 3], rng);
    Problem {
        name: "normalize".into(),
        store,
        mode: Mode::Train,
        objective: Box::new(move |ctx| {
            let x = ctx.param("input")?;
            let a = ctx.batch_norm("bn", x)?;
            let a = probe(ctx, a, &r1)?;
            let t = ctx.param("tokens")?;
            let b = ctx.layer_norm("ln", t)?;
            let b = probe(ctx, b, &r2)?;
            ctx.graph.add(a, b)
        }),
    }
}

fn activation_problem(rng: &mut ChaCha8Rng) -> Problem {
    let mut store = ParamStore::new();
    // Keep inputs away from the ReLU kink.
    let x = Tensor::<f64>::randn([1, 3, 4, 4], 1.0, rng).map(|v| v + 0.1 * v.signum());
    store.insert("input", x, ParamKind::Trainable);
    let rs: Vec<Tensor<f64>> = (0..3).map(|_| probe_for([1, 3, 4, 4], rng)).collect();
    Problem {
        name: "activation".into(),
        store,
        mode: Mode::Train,
        objective: Box::new(move |ctx| {
            let x = ctx.param("input")?;
            let mut total = None;
            for (kind, r) in [Activation::Silu, Activation::Relu, Activation::Sigmoid].into_iter().zip(&rs) {
                let y = ctx.graph.activation(x, kind);
                let s = probe(ctx, y, r)?;
                total = Some(match total {
                    None => s,
                    Some(t) => ctx.graph.add(t, s)?,
                });
            }
            Ok(total.expect("three activations"))
        }),
    }
}

fn dcl_problem(rng: &mut ChaCha8Rng) -> Problem {
    let dcl = DclParams::new("dcl", 8);
    let mut store = ParamStore::new();
    input(&mut store, "input", [2, 8, 6, 6], rng);
    dcl.init(&mut store, rng);
    let r = probe_for([2, 8, 6, 6], rng);
    Problem {
        name: "dcl".into(),
        store,
        mode: Mode::Train,
        objective: Box::new(move |ctx| {
            let x = ctx.param("input")?;
            let y = dcl.forward(ctx, x)?;
            probe(ctx, y, &r)
        }),
    }
}

fn small_mab() -> MabParams {
    MabParams {
        heads: 2,
        window: 4,
        reduction: 4,
        alpha: 0.5,
        ..MabParams::new("mab", 8)
    }
}

fn mab_problem(name: &str, dims: [usize; 4], rng: &mut ChaCha8Rng) -> Problem {
    let mab = small_mab();
    let mut store = ParamStore::new();
    input(&mut store, "input", dims, rng);
    mab.init(&mut store, rng);
    perturb_all(&mut store, 0.1, rng);
    let r = probe_for(dims, rng);
    let which = name.to_string();
    Problem {
        name: name.into(),
        store,
        mode: Mode::Train,
        objective: Box::new(move |ctx| {
            let x = ctx.param("input")?;
            let y = match which.as_str() {
                "channel_attention" => mab.channel_attention(ctx, x)?,
                "window_msa" => mab.window_msa(ctx, x)?,
                _ => mab.forward(ctx, x)?,
            };
            probe(ctx, y, &r)
        }),
    }
}

fn tvconv_problem(rng: &mut ChaCha8Rng) -> Problem {
    let tv = TvConvParams {
        affine_channels: 4,
        hidden: 8,
        ..TvConvParams::new("tv", 4, (2, 2))
    };
    let mut store = ParamStore::new();
    input(&mut store, "input", [1, 4, 4, 4], rng);
    tv.init(&mut store, rng);
    let r = probe_for([1, 4, 4, 4], rng);
    Problem {
        name: "tvconv".into(),
        store,
        mode: Mode::Train,
        objective: Box::new(move |ctx| {
            let x = ctx.param("input")?;
            let y = tv.forward(ctx, x)?;
            probe(ctx, y, &r)
        }),
    }
}

fn head_problem(rng: &mut ChaCha8Rng) -> Problem {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::new();
    input(&mut store, "input", [2, 8, 2, 2], rng);
    store.init_conv("head", [cfg.head_channels(), 8, 1, 1], true, rng);
    perturb_all(&mut store, 0.1, rng);
    let r = probe_for([2, cfg.head_channels(), 2, 2], rng);
    Problem {
        name: "head".into(),
        store,
        mode: Mode::Train,
        objective: Box::new(move |ctx| {
            let x = ctx.param("input")?;
            let y = ctx.conv("head", x, Conv2dSpec::default(), true)?;
            probe(ctx, y, &r)
        }),
    }
}

fn loss_problem(rng: &mut ChaCha8Rng) -> Problem {
    let cfg = ModelConfig::tiny();
    let (gh, gw) = cfg.grid();
    let mut store = ParamStore::new();
    input(&mut store, "raw", [2, cfg.head_channels(), gh, gw], rng);
    let side = cfg.input.0 as f64;
    let targets: Vec<Vec<GtBox>> = (0..2)
        .map(|_| {
            (0..3)
                .map(|_| {
                    let w = rng.random_range(6.0..side / 2.0);
                    let h = rng.random_range(6.0..side / 2.0);
                    GtBox {
                        bbox: BBox::new(
                            rng.random_range(w / 2.0..side - w / 2.0),
                            rng.random_range(h / 2.0..side - h / 2.0),
                            w,
                            h,
                        ),
                        class_id: rng.random_range(0..cfg.num_classes),
                    }
                })
                .collect()
        })
        .collect();
    Problem {
        name: "loss".into(),
        store,
        mode: Mode::Train,
        objective: Box::new(move |ctx| {
            let raw = ctx.param("raw")?;
            let (l, _) = ctx.graph.detection_loss(raw, &targets, &cfg, &LossWeights::default())?;
            Ok(l)
        }),
    }
}

/// The per-block problems, all derived from `seed`.
pub fn block_problems(seed: u64) -> Vec<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        conv_problem(&mut rng),
        normalize_problem(&mut rng),
        activation_problem(&mut rng),
        dcl_problem(&mut rng),
        mab_problem("channel_attention", [2, 8, 5, 5], &mut rng),
        mab_problem("window_msa", [1, 8, 6, 6], &mut rng),
        mab_problem("mab", [1, 8, 6, 6], &mut rng),
        tvconv_problem(&mut rng),
        head_problem(&mut rng),
        loss_problem(&mut rng),
    ]
}

/// Runs every block problem, checking up to `coords` entries per tensor.
pub fn gradcheck_suite(seed: u64, coords: usize) -> Result<Vec<BlockCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    block_problems(seed)
        .iter_mut()
        .map(|p| check_problem(p, coords, &mut rng))
        .collect()
}

/// Whole-detector problem: a probe of the head map of a freshly
/// initialized model in training mode.
pub fn model_problem(config: ModelConfig, batch: usize, seed: u64) -> Result<Problem> {
    let model = DtNetModel::<f64>::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = model.config.input;
    let (gh, gw) = model.config.grid();
    let mut store = model.params.clone();
    input(&mut store, "input", [batch, 3, h, w], &mut rng);
    let r = probe_for([batch, model.config.head_channels(), gh, gw], &mut rng);
    Ok(Problem {
        name: "model".into(),
        store,
        mode: Mode::Train,
        objective: Box::new(move |ctx| {
            let x = ctx.param("input")?;
            let y = model.forward(ctx, x)?;
            probe(ctx, y, &r)
        }),
    })
}
