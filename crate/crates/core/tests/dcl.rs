mod common;

use common::{conv_oracle, diff_norm, rng, run};
use dtnet_core::dcl::{DcbParams, DclParams};
use dtnet_core::nn::ParamKind;
use dtnet_core::{Ctx, Mode, ParamStore, Tensor};
use proptest::prelude::*;

fn layer(c: usize, seed: u64) -> (DclParams, ParamStore<f64>) {
    let p = DclParams::new("dcl", c);
    let mut store = ParamStore::new();
    p.init(&mut store, &mut rng(seed));
    (p, store)
}

#[test]
fn channel_context_hand_example() {
    let (p, mut store) = layer(3, 0);
    store.set(&format!("{}.weight", p.cce_name()), Tensor::ones([1, 1, 3, 1])).unwrap();
    let x = Tensor::from_fn([1, 3, 2, 2], |[_, c, _, _]| (c + 1) as f64);
    let y = run(&store, &x, |ctx, v| p.cce(ctx, v));
    assert_eq!(y.dims(), [1, 3, 1, 1]);
    assert_eq!(y.data(), &[3.0, 6.0, 5.0]);

    store.set(&format!("{}.weight", p.cce_name()), Tensor::zeros([1, 1, 3, 1])).unwrap();
    let y = run(&store, &x, |ctx, v| p.cce(ctx, v));
    assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn spatial_context_matches_conv_oracle() {
    let (p, store) = layer(4, 1);
    let x = Tensor::<f64>::randn([2, 4, 5, 7], 1.0, &mut rng(2));
    let y = run(&store, &x, |ctx, v| p.sce(ctx, v));
    let w = store.get(&format!("{}.weight", p.sce_name())).unwrap();
    let b = store.get(&format!("{}.bias", p.sce_name())).unwrap();
    assert!(y.max_abs_diff(&conv_oracle(&x, w, Some(b), 1, 1)) <= 1e-12);
}

#[test]
fn zero_fuse_gives_zero_output() {
    let (p, mut store) = layer(4, 3);
    for suffix in ["weight", "bias"] {
        let name = format!("{}.{suffix}", p.fuse_name());
        let dims = store.get(&name).unwrap().dims();
        store.set(&name, Tensor::zeros(dims)).unwrap();
    }
    let x = Tensor::<f64>::randn([1, 4, 6, 6], 1.0, &mut rng(4));
    let y = run(&store, &x, |ctx, v| p.forward(ctx, v));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_not_homogeneous() {
    let (p, store) = layer(8, 5);
    let x = Tensor::<f64>::randn([1, 8, 8, 8], 1.0, &mut rng(6));
    let once = run(&store, &x, |ctx, v| p.forward(ctx, v)).map(|v| 2.0 * v);
    let doubled = run(&store, &x.map(|v| 2.0 * v), |ctx, v| p.forward(ctx, v));
    assert!(diff_norm(&once, &doubled) > 1e-3 * doubled.l2_norm());
}

#[test]
fn dynamic_weights_depend_on_input() {
    let (p, store) = layer(8, 7);
    let mut r = rng(8);
    let x = Tensor::<f64>::randn([1, 8, 6, 6], 1.0, &mut r);
    let y = Tensor::<f64>::randn([1, 8, 6, 6], 1.0, &mut r);
    let wx = run(&store, &x, |ctx, v| p.dynamic_weights(ctx, v));
    let wy = run(&store, &y, |ctx, v| p.dynamic_weights(ctx, v));
    assert_eq!(wx.dims(), x.dims());
    assert!(diff_norm(&wx, &wy) > 0.0);
}

#[test]
fn factorization_holds_exactly() {
    let (p, store) = layer(6, 9);
    let x = Tensor::<f64>::randn([2, 6, 5, 5], 1.0, &mut rng(10));
    let direct = run(&store, &x, |ctx, v| p.forward(ctx, v));
    let manual = run(&store, &x, |ctx, v| {
        let s = p.sce(ctx, v)?;
        let c = p.cce(ctx, v)?;
        let sum = ctx.graph.add(s, c)?;
        let w = ctx.conv(&p.fuse_name(), sum, dtnet_core::Conv2dSpec::default(), true)?;
        ctx.graph.mul(w, v)
    });
    assert_eq!(direct, manual);
}

#[test]
fn spatial_context_weights_receive_gradient() {
    let (p, store) = layer(4, 11);
    let x = Tensor::<f64>::randn([1, 4, 5, 5], 1.0, &mut rng(12));
    let mut ctx = Ctx::training(&store, Mode::Train);
    let v = ctx.input(x);
    let y = p.forward(&mut ctx, v).unwrap();
    let loss = ctx.graph.sum(y);
    let grads = ctx.graph.backward(loss).unwrap();
    let by_name: std::collections::HashMap<_, _> = ctx.param_grads(&grads).into_iter().collect();
    assert!(by_name[&format!("{}.weight", p.sce_name())].max_abs() > 0.0);
    assert!(by_name[&format!("{}.weight", p.cce_name())].max_abs() > 0.0);
}

#[test]
fn channel_mismatch_is_rejected() {
    let (p, store) = layer(4, 13);
    let mut ctx = Ctx::inference(&store);
    let v = ctx.input(Tensor::zeros([1, 3, 4, 4]));
    assert!(p.forward(&mut ctx, v).is_err());
}

fn block(cin: usize, width: usize, seed: u64) -> (DcbParams, ParamStore<f32>) {
    let p = DcbParams::new("dcb", cin, width, true);
    let mut store = ParamStore::new();
    p.init(&mut store, &mut rng(seed));
    (p, store)
}

#[test]
fn block_shape_at_default_width() {
    let (p, store) = block(3, 64, 14);
    let x = Tensor::<f32>::randn([1, 3, 256, 256], 1.0, &mut rng(15));
    let y = run(&store, &x, |ctx, v| p.forward(ctx, v));
    assert_eq!(y.dims(), [1, 64, 128, 128]);
}

#[test]
fn block_equals_manual_composition_and_is_deterministic() {
    let (p, store) = block(3, 16, 16);
    let x = Tensor::<f32>::randn([2, 3, 16, 16], 1.0, &mut rng(17));
    let direct = run(&store, &x, |ctx, v| p.forward(ctx, v));
    let again = run(&store, &x, |ctx, v| p.forward(ctx, v));
    assert_eq!(direct, again);
    let dcl = DclParams::new("dcb.dcl", 16);
    let manual = run(&store, &x, |ctx, v| {
        let y = p.cbs1.forward(ctx, v)?;
        let y = p.cbs2.forward(ctx, y)?;
        let y = dcl.forward(ctx, y)?;
        let y = ctx.batch_norm("dcb.dbs_bn", y)?;
        Ok(ctx.graph.activation(y, dtnet_core::Activation::Silu))
    });
    assert_eq!(direct, manual);
}

#[test]
fn static_tail_has_no_dynamic_parameters() {
    let p = DcbParams::new("dcb", 3, 8, false);
    let mut store = ParamStore::<f32>::new();
    p.init(&mut store, &mut rng(18));
    assert!(store.iter().all(|(n, _)| !n.contains(".dcl.")));
    assert_eq!(store.kind("dcb.static_conv.weight"), Some(ParamKind::Trainable));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn output_dims_equal_input_dims(c in 1usize..6, h in 1usize..9, w in 1usize..9, seed in 0u64..100) {
        let (p, store) = layer(c, seed);
        let x = Tensor::<f64>::randn([2, c, h, w], 1.0, &mut rng(seed + 1));
        let y = run(&store, &x, |ctx, v| p.forward(ctx, v));
        prop_assert_eq!(y.dims(), x.dims());
    }
}
