mod common;

use common::{rng, run};
use dtnet_core::nn::{CbsParams, ElanParams, MpcmParams};
use dtnet_core::{Activation, Conv2dSpec, Ctx, Mode, ParamStore, Tensor};
use proptest::prelude::*;

fn store_for(init: impl FnOnce(&mut ParamStore<f64>)) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    init(&mut s);
    s
}

#[test]
fn identity_cbs_is_silu_in_inference() {
    let p = CbsParams::new("cbs", 3, 3, 1, 1);
    let mut store = store_for(|s| p.init(s, &mut rng(0)));
    store
        .set("cbs.conv.weight", Tensor::from_fn([3, 3, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 }))
        .unwrap();
    let x = Tensor::<f64>::randn([2, 3, 4, 4], 1.0, &mut rng(1));
    let y = run(&store, &x, |ctx, v| p.forward(ctx, v));
    // Unit running stats leave x scaled by 1/sqrt(1 + eps).
    let k = 1.0 / (1.0 + dtnet_core::ops::NORM_EPS).sqrt();
    assert!(y.max_abs_diff(&x.map(|v| Activation::Silu.apply(v * k))) <= 1e-15);
}

#[test]
fn cbs_stride_and_composition() {
    let p = CbsParams::new("cbs", 8, 5, 3, 2);
    let store = store_for(|s| p.init(s, &mut rng(2)));
    let x = Tensor::<f64>::randn([1, 8, 32, 32], 1.0, &mut rng(3));
    for mode in [Mode::Infer, Mode::Train] {
        let call = |f: &dyn Fn(&mut Ctx<'_, f64>, dtnet_core::Var) -> dtnet_core::Result<dtnet_core::Var>| {
            let mut ctx = Ctx::training(&store, mode);
            let v = ctx.input(x.clone());
            let y = f(&mut ctx, v).unwrap();
            ctx.value(y).clone()
        };
        let y = call(&|c, v| p.forward(c, v));
        assert_eq!(y.dims(), [1, 5, 16, 16]);
        let manual = call(&|c, v| {
            let y = c.conv("cbs.conv", v, Conv2dSpec::same(3, 2), false)?;
            let y = c.batch_norm("cbs.bn", y)?;
            Ok(c.graph.activation(y, Activation::Silu))
        });
        assert_eq!(y, manual);
    }
    let mut ctx = Ctx::inference(&store);
    let bad = ctx.input(Tensor::zeros([1, 7, 8, 8]));
    assert!(p.forward(&mut ctx, bad).is_err());
}

#[test]
fn elan_default_widths_and_composition() {
    let p = ElanParams::new("elan", 64, 128);
    let store = store_for(|s| p.init(s, &mut rng(4)));
    let x = Tensor::<f64>::randn([1, 64, 32, 32], 1.0, &mut rng(5));
    let y = run(&store, &x, |ctx, v| p.forward(ctx, v));
    assert_eq!(y.dims(), [1, 128, 32, 32]);
    assert_eq!(p.fuse.cin, p.hidden * 4);

    let manual = run(&store, &x, |c, v| {
        let e0 = p.entry[0].forward(c, v)?;
        let e1 = p.entry[1].forward(c, v)?;
        let a = p.chain[0][0].forward(c, e1)?;
        let a = p.chain[0][1].forward(c, a)?;
        let b = p.chain[1][0].forward(c, a)?;
        let b = p.chain[1][1].forward(c, b)?;
        let cat = c.graph.concat_channels(&[e0, e1, a, b])?;
        p.fuse.forward(c, cat)
    });
    assert_eq!(y, manual);
}

#[test]
fn mpcm_widths_and_composition() {
    let p = MpcmParams::new("mp", 64, 64);
    let store = store_for(|s| p.init(s, &mut rng(6)));
    let x = Tensor::<f64>::randn([1, 64, 32, 32], 1.0, &mut rng(7));
    let y = run(&store, &x, |ctx, v| p.forward(ctx, v));
    assert_eq!(y.dims(), [1, 128, 16, 16]);
    let manual = run(&store, &x, |c, v| {
        let pooled = c.graph.max_pool2d(v, (2, 2), (2, 2))?;
        let pooled = p.pool_conv.forward(c, pooled)?;
        let conv = p.reduce.forward(c, v)?;
        let conv = p.down.forward(c, conv)?;
        c.graph.concat_channels(&[pooled, conv])
    });
    assert_eq!(y, manual);
    let mut ctx = Ctx::inference(&store);
    let odd = ctx.input(Tensor::zeros([1, 64, 9, 8]));
    assert!(matches!(p.forward(&mut ctx, odd), Err(dtnet_core::Error::Shape(_))));
}

#[test]
fn constant_input_survives_pooling() {
    let mut g = dtnet_core::Graph::<f64>::inference();
    let x = g.constant(Tensor::full([1, 4, 6, 6], -0.3));
    let y = g.max_pool2d(x, (2, 2), (2, 2)).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == -0.3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn declared_channels_match_measured(
        cin in 1usize..9, cout in 1usize..9, hidden in 1usize..5, pairs in 0usize..3,
        branch in 1usize..6, half_h in 1usize..5, half_w in 1usize..5, seed in 0u64..1000,
    ) {
        let (h, w) = (2 * half_h, 2 * half_w);
        let x = Tensor::<f64>::randn([2, cin, h, w], 1.0, &mut rng(seed));
        let elan = ElanParams::with_shape("e", cin, hidden, cout, pairs);
        let mp = MpcmParams::new("m", cin, branch);
        let cbs = CbsParams::new("c", cin, cout, 3, 1);
        let store = store_for(|s| {
            let mut r = rng(seed + 1);
            elan.init(s, &mut r);
            mp.init(s, &mut r);
            cbs.init(s, &mut r);
        });
        let e = run(&store, &x, |c, v| elan.forward(c, v));
        prop_assert_eq!(e.dims(), [2, elan.cout, h, w]);
        prop_assert_eq!(elan.fuse.cin, hidden * (2 + pairs));
        let m = run(&store, &x, |c, v| mp.forward(c, v));
        prop_assert_eq!(m.dims(), [2, mp.cout(), h / 2, w / 2]);
        let c1 = run(&store, &x, |c, v| cbs.forward(c, v));
        prop_assert_eq!(c1.dims(), [2, cout, h, w]);
        prop_assert_eq!(&e, &run(&store, &x, |c, v| elan.forward(c, v)));
        prop_assert_eq!(&m, &run(&store, &x, |c, v| mp.forward(c, v)));
    }
}
