use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

impl<T: Scalar> Graph<T> {
    /// Unpadded max pooling. Backward routes each gradient to the first
    /// maximal element of its window in scan order.
    pub fn max_pool2d(&mut self, x: Var, k: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let [n, c, h, w] = self.dims(x);
        if k.0 == 0 || k.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(shape_err!("pool window and stride must be positive"));
        }
        if k.0 > h || k.1 > w {
            return Err(shape_err!("pool window {:?} larger than input {h}x{w}", k));
        }
        let ho = (h - k.0) / stride.0 + 1;
        let wo = (w - k.1) / stride.1 + 1;
        let xv = self.value(x);
        let src = xv.data();
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let mut argmax = Vec::with_capacity(out.numel());
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride.0 * w + ox * stride.1;
                    for ky in 0..k.0 {
                        for kx in 0..k.1 {
                            let idx = base + (oy * stride.0 + ky) * w + ox * stride.1 + kx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    argmax.push(best);
                }
            }
        }
        for (o, &i) in out.data_mut().iter_mut().zip(&argmax) {
            *o = src[i];
        }
        let in_dims = [n, c, h, w];
        Ok(self.push("max_pool2d", out, vec![x], move || {
            Box::new(move |g: &Tensor<T>, _: &[bool]| {
                let mut dx = Tensor::zeros(in_dims);
                let d = dx.data_mut();
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    d[i] = d[i] + gv;
                }
                vec![Some(dx)]
            })
        }))
    }

    /// Mean over H×W, producing `(N, C, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims(x);
        let hw = h * w;
        if hw == 0 {
            return Err(shape_err!("global pooling over empty spatial extent"));
        }
        let inv = T::one() / T::lit(hw as f64);
        let src = self.value(x).data();
        let data = (0..n * c)
            .map(|p| src[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec([n, c, 1, 1], data)?;
        Ok(self.push("global_avg_pool", out, vec![x], move || {
            Box::new(move |g: &Tensor<T>, _: &[bool]| {
                let mut dx = Tensor::zeros([n, c, h, w]);
                for (p, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                    chunk.fill(g.data()[p] * inv);
                }
                vec![Some(dx)]
            })
        }))
    }
}
