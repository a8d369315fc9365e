use dtnet_core::gradcheck::{check_problem, Problem};
use dtnet_core::nn::{Ctx, ParamKind, ParamStore};
use dtnet_core::ops::{conv2d_direct, conv2d_im2col, BatchNormStats, NORM_EPS};
use dtnet_core::{Activation, Conv2dSpec, Graph, Mode, Result, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seven nested loops, accumulated in f64.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = x.dims();
    let [cout, _, kh, kw] = w.dims();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    for b in 0..n {
        for o in 0..cout {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at([b, c, iy as usize, ix as usize]) * w.at([o, c, i, j]);
                                }
                            }
                        }
                    }
                    out.set([b, o, y, xx], acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut r = rng(1);
    let x = Tensor::<f32>::randn([1, 4, 6, 6], 1.0, &mut r);
    let w = Tensor::<f32>::randn([8, 4, 3, 3], 1.0, &mut r);
    let oracle = conv_oracle(&x.cast(), &w.cast(), 1, 1);
    for got in [
        conv2d_direct(&x, &w, None, Conv2dSpec::same(3, 1)).unwrap(),
        conv2d_im2col(&x, &w, None, Conv2dSpec::same(3, 1)).unwrap(),
    ] {
        assert!(got.cast::<f64>().max_abs_diff(&oracle) <= 1e-5);
    }
}

fn max_pool_oracle(x: &Tensor<f32>) -> Tensor<f32> {
    let [n, c, h, w] = x.dims();
    Tensor::from_fn([n, c, h / 2, w / 2], |[b, ch, y, xx]| {
        let mut m = f32::NEG_INFINITY;
        for i in 0..2 {
            for j in 0..2 {
                m = m.max(x.at([b, ch, 2 * y + i, 2 * xx + j]));
            }
        }
        m
    })
}

#[test]
fn max_pool_matches_window_scan() {
    let x = Tensor::<f32>::randn([1, 2, 6, 6], 1.0, &mut rng(2));
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let y = g.max_pool2d(v, (2, 2), (2, 2)).unwrap();
    assert_eq!(g.value(y), &max_pool_oracle(&x));
    let c = g.constant(Tensor::full([1, 1, 4, 4], 0.7f32));
    let y = g.max_pool2d(c, (2, 2), (2, 2)).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.7));
}

#[test]
fn global_average_pool_values() {
    let mut g = Graph::inference();
    let ones = g.constant(Tensor::<f32>::ones([1, 3, 4, 4]));
    let p = g.global_avg_pool(ones).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 1.0, 1.0]);
    let small = g.constant(Tensor::from_vec([1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap());
    let p = g.global_avg_pool(small).unwrap();
    assert_eq!(g.value(p).data(), &[2.5]);

    let x = Tensor::<f32>::randn([2, 3, 7, 5], 3.0, &mut rng(3));
    let v = g.constant(x.clone());
    let p = g.global_avg_pool(v).unwrap();
    for b in 0..2 {
        for c in 0..3 {
            let plane: Vec<f64> = (0..35).map(|i| x.at([b, c, i / 5, i % 5]) as f64).collect();
            let oracle = kahan_sum(&plane) / 35.0;
            assert!((g.value(p).at([b, c, 0, 0]) as f64 - oracle).abs() <= 1e-6);
        }
    }
}

fn kahan_sum(v: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0, 0.0);
    for &x in v {
        let y = x - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

#[test]
fn batch_norm_train_matches_two_pass_oracle() {
    let x = Tensor::<f32>::randn([4, 8, 5, 5], 2.0, &mut rng(4));
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let scale = g.constant(Tensor::ones([8, 1, 1, 1]));
    let shift = g.constant(Tensor::zeros([8, 1, 1, 1]));
    let (y, stats) = g
        .batch_norm(v, scale, shift, Mode::Train, &BatchNormStats::unit(8), NORM_EPS)
        .unwrap();
    let stats = stats.unwrap();
    let count = 4 * 25;
    for c in 0..8 {
        let vals: Vec<f64> = (0..count).map(|i| x.at([i / 25, c, (i % 25) / 5, i % 5]) as f64).collect();
        let mean = vals.iter().sum::<f64>() / count as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
        for (i, &xv) in vals.iter().enumerate() {
            let expect = (xv - mean) / (var + NORM_EPS).sqrt();
            assert!((g.value(y).at([i / 25, c, (i % 25) / 5, i % 5]) as f64 - expect).abs() <= 1e-5);
        }
        let unbiased = var * count as f64 / (count - 1) as f64;
        let running = 0.97 * 1.0 + 0.03 * unbiased;
        assert!((stats.var.data()[c] as f64 - running).abs() <= 1e-5);
        assert!((stats.mean.data()[c] as f64 - 0.03 * mean).abs() <= 1e-6);
    }
}

#[test]
fn batch_norm_infer_is_affine_per_channel() {
    let mut r = rng(5);
    let x = Tensor::<f64>::randn([2, 3, 4, 4], 1.0, &mut r);
    let running = BatchNormStats {
        mean: Tensor::randn([3, 1, 1, 1], 1.0, &mut r),
        var: Tensor::randn([3, 1, 1, 1], 1.0, &mut r).map(|v: f64| v.abs() + 0.1),
    };
    let (sc, sh) = (Tensor::randn([3, 1, 1, 1], 1.0, &mut r), Tensor::randn([3, 1, 1, 1], 1.0, &mut r));
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let (s, t) = (g.constant(sc.clone()), g.constant(sh.clone()));
    let (y, upd) = g.batch_norm(v, s, t, Mode::Infer, &running, NORM_EPS).unwrap();
    assert!(upd.is_none());
    for c in 0..3 {
        let alpha = sc.data()[c] / (running.var.data()[c] + NORM_EPS).sqrt();
        let beta = sh.data()[c] - alpha * running.mean.data()[c];
        for i in 0..32 {
            let idx = [i / 16, c, (i % 16) / 4, i % 4];
            assert!((g.value(y).at(idx) - (alpha * x.at(idx) + beta)).abs() < 1e-12);
        }
    }
}

#[test]
fn silu_at_one() {
    assert!((Activation::Silu.apply(1.0f64) - 0.731059).abs() < 1e-5);
    assert_eq!(Activation::Silu.apply(0.0f64), 0.0);
    assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
}

type Build = Box<dyn Fn(&mut Ctx<'_, f64>, Var, Var) -> Result<Var>>;

/// Problem over two random inputs `a` (dims_a) and `b` (dims_b) and a
/// random probe of the output.
fn op_problem(name: &str, seed: u64, dims_a: [usize; 4], dims_b: [usize; 4], out: [usize; 4], build: Build) -> Problem {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    store.insert("a", Tensor::randn(dims_a, 1.0, &mut r), ParamKind::Trainable);
    store.insert("b", Tensor::randn(dims_b, 1.0, &mut r).map(|v: f64| v + 0.2 * v.signum()), ParamKind::Trainable);
    let probe = Tensor::<f64>::randn(out, 1.0, &mut r);
    Problem {
        name: name.into(),
        store,
        mode: Mode::Train,
        objective: Box::new(move |ctx| {
            let a = ctx.param("a")?;
            let b = ctx.param("b")?;
            let y = build(ctx, a, b)?;
            ctx.graph.weighted_sum(y, probe.clone())
        }),
    }
}

#[test]
fn every_op_matches_finite_differences() {
    let unit = [1, 1, 1, 1];
    let problems = vec![
        op_problem("conv2d", 1, [2, 4, 5, 5], [6, 2, 3, 3], [2, 6, 3, 3], Box::new(|c, a, b| {
            let spec = Conv2dSpec { stride: (2, 2), pad: (1, 1), groups: 2 };
            c.graph.conv2d(a, b, None, spec)
        })),
        op_problem("conv2d_bias", 2, [1, 3, 4, 4], [2, 1, 1, 1], [1, 2, 4, 4], Box::new(|c, a, b| {
            let w = c.graph.constant(Tensor::from_fn([2, 3, 3, 3], |i| (i[0] + i[1] + i[2] * i[3]) as f64 * 0.1));
            c.graph.conv2d(a, w, Some(b), Conv2dSpec::same(3, 1))
        })),
        op_problem("max_pool2d", 3, [1, 2, 4, 6], unit, [1, 2, 2, 3], Box::new(|c, a, _| c.graph.max_pool2d(a, (2, 2), (2, 2)))),
        op_problem("global_avg_pool", 4, [2, 3, 3, 4], unit, [2, 3, 1, 1], Box::new(|c, a, _| c.graph.global_avg_pool(a))),
        op_problem("batch_norm", 5, [3, 2, 3, 3], [2, 1, 1, 1], [3, 2, 3, 3], Box::new(|c, a, b| {
            let shift = c.graph.constant(Tensor::from_vec([2, 1, 1, 1], vec![0.1, -0.3])?);
            Ok(c.graph.batch_norm(a, b, shift, Mode::Train, &BatchNormStats::unit(2), NORM_EPS)?.0)
        })),
        op_problem("layer_norm", 6, [2, 4, 2, 3], [4, 1, 1, 1], [2, 4, 2, 3], Box::new(|c, a, b| {
            let shift = c.graph.constant(Tensor::full([4, 1, 1, 1], 0.5));
            c.graph.layer_norm(a, b, shift, NORM_EPS)
        })),
        op_problem("activations", 7, unit, [1, 2, 3, 3], [1, 2, 3, 3], Box::new(|c, _, b| {
            let s = c.graph.activation(b, Activation::Silu);
            let r = c.graph.activation(b, Activation::Relu);
            let g = c.graph.activation(b, Activation::Sigmoid);
            let y = c.graph.add(s, r)?;
            c.graph.mul(y, g)
        })),
        op_problem("add_mul_broadcast", 8, [2, 3, 2, 2], [1, 3, 1, 1], [2, 3, 2, 2], Box::new(|c, a, b| {
            let y = c.graph.mul(a, b)?;
            let y = c.graph.add(y, b)?;
            Ok(c.graph.scale(y, 1.5))
        })),
        op_problem("matmul", 9, [1, 1, 3, 4], [1, 1, 4, 2], [1, 1, 3, 2], Box::new(|c, a, b| c.graph.matmul(a, b))),
        op_problem("bmm_transposed", 10, [2, 2, 3, 4], [2, 2, 5, 4], [2, 2, 3, 5], Box::new(|c, a, b| c.graph.bmm(a, b, false, true))),
        op_problem("softmax", 11, [1, 2, 3, 5], unit, [1, 2, 3, 5], Box::new(|c, a, _| Ok(c.graph.softmax_last(a)))),
        op_problem("reshape_permute", 12, [1, 2, 3, 4], unit, [3, 1, 4, 2], Box::new(|c, a, _| {
            let y = c.graph.permute(a, [2, 0, 3, 1])?;
            c.graph.reshape(y, [3, 1, 4, 2])
        })),
        op_problem("pad_crop", 13, [1, 2, 3, 3], unit, [1, 2, 4, 3], Box::new(|c, a, _| {
            let y = c.graph.pad2d(a, (1, 2, 0, 1));
            c.graph.crop2d(y, 0, 1, 4, 3)
        })),
        op_problem("concat", 14, [1, 2, 2, 2], [1, 3, 2, 2], [1, 5, 2, 2], Box::new(|c, a, b| c.graph.concat_channels(&[a, b]))),
        op_problem("windows", 15, [1, 3, 4, 4], unit, [1, 3, 4, 4], Box::new(|c, a, _| {
            let t = c.graph.window_partition(a, 2)?;
            let t = c.graph.scale(t, 2.0);
            let t = c.graph.activation(t, Activation::Sigmoid);
            c.graph.window_merge(t, [1, 3, 4, 4], 2)
        })),
        op_problem("resize_bilinear", 16, [1, 2, 2, 3], unit, [1, 2, 5, 4], Box::new(|c, a, _| c.graph.resize_bilinear(a, 5, 4))),
        op_problem("position_conv", 17, [1, 2, 3, 3], [1, 18, 3, 3], [1, 2, 3, 3], Box::new(|c, a, b| c.graph.position_conv(a, b, 3))),
    ];
    let mut r = rng(99);
    for mut p in problems {
        let report = check_problem(&mut p, 40, &mut r).unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_paths_agree(
        seed in 0u64..1000,
        cin_g in 1usize..3,
        cout_g in 1usize..3,
        groups in 1usize..3,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3,
        pad in 0usize..3,
        h in 5usize..9,
        w in 5usize..9,
    ) {
        let mut r = rng(seed);
        let x = Tensor::<f32>::randn([2, cin_g * groups, h, w], 1.0, &mut r);
        let wt = Tensor::<f32>::randn([cout_g * groups, cin_g, k, k], 1.0, &mut r);
        let b = Tensor::<f32>::randn([cout_g * groups, 1, 1, 1], 1.0, &mut r);
        let spec = Conv2dSpec { stride: (stride, stride), pad: (pad, pad), groups };
        let d = conv2d_direct(&x, &wt, Some(&b), spec).unwrap();
        let i = conv2d_im2col(&x, &wt, Some(&b), spec).unwrap();
        prop_assert!(d.max_abs_diff(&i) <= 1e-5);
    }

    #[test]
    fn conv_is_linear(seed in 0u64..1000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let mut r = rng(seed);
        let x = Tensor::<f32>::randn([1, 3, 6, 6], 1.0, &mut r);
        let y = Tensor::<f32>::randn([1, 3, 6, 6], 1.0, &mut r);
        let w = Tensor::<f32>::randn([4, 3, 3, 3], 0.5, &mut r);
        let spec = Conv2dSpec::same(3, 1);
        let mut mix = x.map(|v| a * v);
        mix.add_assign(&y.map(|v| b * v));
        let lhs = conv2d_im2col(&mix, &w, None, spec).unwrap();
        let mut rhs = conv2d_im2col(&x, &w, None, spec).unwrap().map(|v| a * v);
        rhs.add_assign(&conv2d_im2col(&y, &w, None, spec).unwrap().map(|v| b * v));
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-5);
    }

    #[test]
    fn conv_is_shift_equivariant_in_the_interior(seed in 0u64..1000, dy in 0usize..3, dx in 0usize..3) {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn([1, 2, 10, 10], 1.0, &mut r);
        let w = Tensor::<f64>::randn([3, 2, 3, 3], 1.0, &mut r);
        let shifted = Tensor::from_fn(x.dims(), |[n, c, y, xx]| {
            if y >= dy && xx >= dx { x.at([n, c, y - dy, xx - dx]) } else { 0.0 }
        });
        let spec = Conv2dSpec::same(3, 1);
        let a = conv2d_im2col(&x, &w, None, spec).unwrap();
        let b = conv2d_im2col(&shifted, &w, None, spec).unwrap();
        for c in 0..3 {
            for y in (1 + dy)..9 {
                for xx in (1 + dx)..9 {
                    prop_assert!((b.at([0, c, y, xx]) - a.at([0, c, y - dy, xx - dx])).abs() <= 1e-12);
                }
            }
        }
    }
}
