//! Data-movement ops. All of them are index gathers, so they share one
//! backward rule (scatter-add).

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Gather index meaning "read a zero" (padding).
const ZERO: usize = usize::MAX;

fn offset(dims: [usize; 4], i: [usize; 4]) -> usize {
    ((i[0] * dims[1] + i[1]) * dims[2] + i[2]) * dims[3] + i[3]
}

fn index_map(out: [usize; 4], mut f: impl FnMut([usize; 4]) -> usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(out.iter().product());
    for a in 0..out[0] {
        for b in 0..out[1] {
            for c in 0..out[2] {
                for d in 0..out[3] {
                    idx.push(f([a, b, c, d]));
                }
            }
        }
    }
    idx
}

impl<T: Scalar> Graph<T> {
    fn gather(&mut self, kind: &'static str, x: Var, out_dims: [usize; 4], index: Vec<usize>) -> Var {
        let src = self.value(x).data();
        let data = index
            .iter()
            .map(|&i| if i == ZERO { T::zero() } else { src[i] })
            .collect();
        let out = Tensor::from_vec(out_dims, data).expect("index map covers output");
        let in_dims = self.dims(x);
        self.push(kind, out, vec![x], move || {
            Box::new(move |g: &Tensor<T>, _: &[bool]| {
                let mut dx = Tensor::zeros(in_dims);
                let d = dx.data_mut();
                for (&i, &gv) in index.iter().zip(g.data()) {
                    if i != ZERO {
                        d[i] = d[i] + gv;
                    }
                }
                vec![Some(dx)]
            })
        })
    }

    pub fn reshape(&mut self, x: Var, dims: [usize; 4]) -> Result<Var> {
        let in_dims = self.dims(x);
        let out = self.value(x).clone().reshape(dims)?;
        Ok(self.push("reshape", out, vec![x], move || {
            Box::new(move |g: &Tensor<T>, _: &[bool]| {
                vec![Some(g.clone().reshape(in_dims).expect("same numel"))]
            })
        }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: [usize; 4]) -> Result<Var> {
        let mut seen = [false; 4];
        for &a in &axes {
            if a >= 4 || seen[a] {
                return Err(shape_err!("invalid permutation {:?}", axes));
            }
            seen[a] = true;
        }
        let d = self.dims(x);
        let out_dims = axes.map(|a| d[a]);
        let index = index_map(out_dims, |o| {
            let mut i = [0; 4];
            for (k, &a) in axes.iter().enumerate() {
                i[a] = o[k];
            }
            offset(d, i)
        });
        Ok(self.gather("permute", x, out_dims, index))
    }

    /// Zero padding of the spatial axes by `(top, bottom, left, right)`.
    pub fn pad2d(&mut self, x: Var, pad: (usize, usize, usize, usize)) -> Var {
        let d = self.dims(x);
        let (t, b, l, r) = pad;
        let out_dims = [d[0], d[1], d[2] + t + b, d[3] + l + r];
        let index = index_map(out_dims, |[n, c, y, x]| {
            if y < t || y >= t + d[2] || x < l || x >= l + d[3] {
                ZERO
            } else {
                offset(d, [n, c, y - t, x - l])
            }
        });
        self.gather("pad2d", x, out_dims, index)
    }

    /// Spatial window `[top, top+h) × [left, left+w)`.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let d = self.dims(x);
        if top + h > d[2] || left + w > d[3] {
            return Err(shape_err!("crop {h}x{w}@({top},{left}) exceeds {:?}", d));
        }
        let out_dims = [d[0], d[1], h, w];
        let index = index_map(out_dims, |[n, c, y, x]| offset(d, [n, c, y + top, x + left]));
        Ok(self.gather("crop2d", x, out_dims, index))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .map(|&v| self.dims(v))
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let dims: Vec<_> = xs.iter().map(|&v| self.dims(v)).collect();
        for d in &dims {
            if d[0] != first[0] || d[2] != first[2] || d[3] != first[3] {
                return Err(shape_err!("concat operands disagree: {:?}", dims));
            }
        }
        let [n, _, h, w] = first;
        let hw = h * w;
        let c_total: usize = dims.iter().map(|d| d[1]).sum();
        let mut out = Tensor::zeros([n, c_total, h, w]);
        {
            let o = out.data_mut();
            let mut c0 = 0;
            for (&v, d) in xs.iter().zip(&dims) {
                let src = self.value(v).data();
                for b in 0..n {
                    let dst = &mut o[(b * c_total + c0) * hw..][..d[1] * hw];
                    dst.copy_from_slice(&src[b * d[1] * hw..][..d[1] * hw]);
                }
                c0 += d[1];
            }
        }
        Ok(self.push("concat", out, xs.to_vec(), move || {
            Box::new(move |g: &Tensor<T>, needs: &[bool]| {
                let gd = g.data();
                let mut c0 = 0;
                dims.iter()
                    .zip(needs)
                    .map(|(d, &need)| {
                        let part = need.then(|| {
                            let mut t = Tensor::zeros(*d);
                            let td = t.data_mut();
                            for b in 0..n {
                                td[b * d[1] * hw..][..d[1] * hw]
                                    .copy_from_slice(&gd[(b * c_total + c0) * hw..][..d[1] * hw]);
                            }
                            t
                        });
                        c0 += d[1];
                        part
                    })
                    .collect()
            })
        }))
    }

    /// Splits `(N,C,H,W)` into non-overlapping `win×win` windows, returning
    /// tokens `(N·(H/win)·(W/win), 1, win², C)`. Windows are ordered by
    /// image, then row, then column; tokens row-major inside a window.
    pub fn window_partition(&mut self, x: Var, win: usize) -> Result<Var> {
        let d = self.dims(x);
        let [n, c, h, w] = d;
        if win == 0 || h % win != 0 || w % win != 0 {
            return Err(shape_err!("window {win} does not tile {h}x{w}"));
        }
        let (nh, nw) = (h / win, w / win);
        let out_dims = [n * nh * nw, 1, win * win, c];
        let index = index_map(out_dims, |[b, _, t, ch]| {
            let img = b / (nh * nw);
            let wy = (b / nw) % nh;
            let wx = b % nw;
            offset(d, [img, ch, wy * win + t / win, wx * win + t % win])
        });
        Ok(self.gather("window_partition", x, out_dims, index))
    }

    /// Inverse of [`window_partition`](Self::window_partition).
    pub fn window_merge(&mut self, tokens: Var, dims: [usize; 4], win: usize) -> Result<Var> {
        let [n, c, h, w] = dims;
        if win == 0 || h % win != 0 || w % win != 0 {
            return Err(shape_err!("window {win} does not tile {h}x{w}"));
        }
        let (nh, nw) = (h / win, w / win);
        let td = [n * nh * nw, 1, win * win, c];
        if self.dims(tokens) != td {
            return Err(shape_err!("tokens {:?} do not match {:?}", self.dims(tokens), td));
        }
        let index = index_map(dims, |[img, ch, y, x]| {
            let b = (img * nh + y / win) * nw + x / win;
            offset(td, [b, 0, (y % win) * win + x % win, ch])
        });
        Ok(self.gather("window_merge", tokens, dims, index))
    }
}
