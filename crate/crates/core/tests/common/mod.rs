#![allow(dead_code)]

pub mod eval_oracle;

use dtnet_core::{Ctx, Graph, Mode, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct 7-loop convolution with zero padding, accumulated in f64.
pub fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [n, cin, h, wd] = x.dims();
    let [cout, _, kh, kw] = w.dims();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    Tensor::from_fn([n, cout, oh, ow], |[b, o, y, xx]| {
        let mut acc = bias.map_or(0.0, |b| b.data()[o]);
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
        acc
    })
}

/// Runs `f` on a fresh inference context and returns the output value.
pub fn run<T: dtnet_core::Scalar>(
    store: &ParamStore<T>,
    x: &Tensor<T>,
    f: impl FnOnce(&mut Ctx<'_, T>, Var) -> dtnet_core::Result<Var>,
) -> Tensor<T> {
    let mut ctx = Ctx::with_graph(Graph::inference(), store, Mode::Infer);
    let v = ctx.input(x.clone());
    let y = f(&mut ctx, v).unwrap();
    ctx.value(y).clone()
}

pub fn diff_norm(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Interior shift probe: `out(shift(x))` against `shift(out(x))` for a
/// one-column shift, restricted to positions untouched by padding.
pub fn shift_delta(f: impl Fn(&Tensor<f64>) -> Tensor<f64>, x: &Tensor<f64>) -> f64 {
    let [n, _, h, w] = x.dims();
    let shifted = Tensor::from_fn(x.dims(), |[b, ch, y, xx]| if xx >= 1 { x.at([b, ch, y, xx - 1]) } else { 0.0 });
    let (a, b) = (f(x), f(&shifted));
    let oc = a.dims()[1];
    let (mut num, mut den) = (0.0, 0.0);
    for bb in 0..n {
        for ch in 0..oc {
            for y in 1..h - 1 {
                for xx in 2..w - 1 {
                    num += (b.at([bb, ch, y, xx]) - a.at([bb, ch, y, xx - 1])).powi(2);
                    den += a.at([bb, ch, y, xx - 1]).powi(2);
                }
            }
        }
    }
    (num / den).sqrt()
}
