use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Source taps `(lo, hi, frac)` for half-pixel-centred linear resampling.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let p = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (p.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, p - lo as f64)
        })
        .collect()
}

impl<T: Scalar> Graph<T> {
    /// Bilinear resize of the spatial axes.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims(x);
        if h == 0 || w == 0 || oh == 0 || ow == 0 {
            return Err(shape_err!("cannot resize {h}x{w} to {oh}x{ow}"));
        }
        if (h, w) == (oh, ow) {
            return Ok(x);
        }
        let (ty, tx) = (taps(h, oh), taps(w, ow));
        // (output offset within a plane, input offset within a plane, weight)
        let mut stencil = Vec::with_capacity(oh * ow * 4);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let o = oy * ow + ox;
                stencil.push((o, y0 * w + x0, T::lit((1.0 - fy) * (1.0 - fx))));
                stencil.push((o, y0 * w + x1, T::lit((1.0 - fy) * fx)));
                stencil.push((o, y1 * w + x0, T::lit(fy * (1.0 - fx))));
                stencil.push((o, y1 * w + x1, T::lit(fy * fx)));
            }
        }
        let mut out = Tensor::zeros([n, c, oh, ow]);
        {
            let src = self.value(x).data();
            for (p, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
                let s = &src[p * h * w..];
                for &(o, i, wt) in &stencil {
                    dst[o] = dst[o] + wt * s[i];
                }
            }
        }
        Ok(self.push("resize_bilinear", out, vec![x], move || {
            Box::new(move |g: &Tensor<T>, _: &[bool]| {
                let mut dx = Tensor::zeros([n, c, h, w]);
                for (p, d) in dx.data_mut().chunks_mut(h * w).enumerate() {
                    let gp = &g.data()[p * oh * ow..];
                    for &(o, i, wt) in &stencil {
                        d[i] = d[i] + wt * gp[o];
                    }
                }
                vec![Some(dx)]
            })
        }))
    }
}
