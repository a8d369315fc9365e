//! 2-D convolution: a direct-summation reference and a patch-matrix
//! (im2col + GEMM) path. The graph op runs the patch-matrix path.

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Scalar, Tensor};

/// Stride, zero padding and channel grouping of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            pad: (0, 0),
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    /// Stride-`s` convolution with "same" padding for an odd kernel `k`.
    pub fn same(k: usize, s: usize) -> Self {
        Self {
            stride: (s, s),
            pad: (k / 2, k / 2),
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn new<T: Scalar>(
        input: [usize; 4],
        weight: [usize; 4],
        bias: Option<&Tensor<T>>,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        let [n, cin, h, w] = input;
        let [cout, cg, kh, kw] = weight;
        let g = spec.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 {
            return Err(shape_err!(
                "groups {g} must divide input channels {cin} and output channels {cout}"
            ));
        }
        if cg != cin / g {
            return Err(shape_err!(
                "weight {:?} expects {} input channels per group, input has {}",
                weight,
                cg,
                cin / g
            ));
        }
        if spec.stride.0 == 0 || spec.stride.1 == 0 {
            return Err(shape_err!("stride must be positive"));
        }
        if let Some(b) = bias {
            if b.numel() != cout {
                return Err(shape_err!("bias has {} entries, expected {cout}", b.numel()));
            }
        }
        let (ph, pw) = spec.pad;
        if h + 2 * ph < kh || w + 2 * pw < kw || kh == 0 || kw == 0 {
            return Err(shape_err!(
                "kernel {kh}x{kw} does not fit input {h}x{w} with padding {ph}x{pw}"
            ));
        }
        let ho = (h + 2 * ph - kh) / spec.stride.0 + 1;
        let wo = (w + 2 * pw - kw) / spec.stride.1 + 1;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            spec,
        })
    }

    fn out_dims(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }

    /// Rows of the patch matrix for one group.
    fn patch_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.spec.stride == (1, 1)
            && self.spec.pad == (0, 0)
    }

    /// Unfolds `cin_g` channels of one image (`x` starts at the group's
    /// first channel) into a `(cin_g·kh·kw, ho·wo)` patch matrix.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.pad;
        let plane = self.ho * self.wo;
        for c in 0..self.cin_g() {
            let xc = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-adds patches back.
    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.pad;
        let plane = self.ho * self.wo;
        for c in 0..self.cin_g() {
            let xc = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward<T: Scalar>(&self, x: &[T], weight: &[T], bias: Option<&[T]>) -> Tensor<T> {
        let mut out = Tensor::zeros(self.out_dims());
        let plane = self.ho * self.wo;
        let rows = self.patch_rows();
        let (cin_g, cout_g) = (self.cin_g(), self.cout_g());
        let mut cols = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * plane]
        };
        let o = out.data_mut();
        for n in 0..self.n {
            for g in 0..self.spec.groups {
                let xg = &x[(n * self.cin + g * cin_g) * self.h * self.w..];
                let patches: &[T] = if self.is_pointwise() {
                    &xg[..rows * plane]
                } else {
                    self.im2col(xg, &mut cols);
                    &cols
                };
                let wg = &weight[g * cout_g * rows..(g + 1) * cout_g * rows];
                let og = &mut o[(n * self.cout + g * cout_g) * plane..][..cout_g * plane];
                gemm(cout_g, rows, plane, wg, false, patches, false, T::zero(), og);
            }
            if let Some(b) = bias {
                for co in 0..self.cout {
                    let bv = b[co];
                    for v in &mut o[(n * self.cout + co) * plane..][..plane] {
                        *v = *v + bv;
                    }
                }
            }
        }
        out
    }

    /// Gradients for (input, weight, bias) given upstream `dy`.
    fn backward<T: Scalar>(
        &self,
        x: &[T],
        weight: &[T],
        dy: &[T],
        needs: [bool; 3],
    ) -> [Option<Vec<T>>; 3] {
        let plane = self.ho * self.wo;
        let rows = self.patch_rows();
        let (cin_g, cout_g) = (self.cin_g(), self.cout_g());
        let mut dx = needs[0].then(|| vec![T::zero(); self.n * self.cin * self.h * self.w]);
        let mut dw = needs[1].then(|| vec![T::zero(); weight.len()]);
        let db = needs[2].then(|| {
            let mut db = vec![T::zero(); self.cout];
            for n in 0..self.n {
                for (co, d) in db.iter_mut().enumerate() {
                    let s: T = dy[(n * self.cout + co) * plane..][..plane].iter().copied().sum();
                    *d = *d + s;
                }
            }
            db
        });
        let pointwise = self.is_pointwise();
        let mut cols = vec![T::zero(); rows * plane];
        for n in 0..self.n {
            for g in 0..self.spec.groups {
                let xoff = (n * self.cin + g * cin_g) * self.h * self.w;
                let dyg = &dy[(n * self.cout + g * cout_g) * plane..][..cout_g * plane];
                let wg = &weight[g * cout_g * rows..(g + 1) * cout_g * rows];
                if let Some(dw) = dw.as_mut() {
                    let patches: &[T] = if pointwise {
                        &x[xoff..xoff + rows * plane]
                    } else {
                        self.im2col(&x[xoff..], &mut cols);
                        &cols
                    };
                    let dwg = &mut dw[g * cout_g * rows..(g + 1) * cout_g * rows];
                    gemm(cout_g, plane, rows, dyg, false, patches, true, T::one(), dwg);
                }
                if let Some(dx) = dx.as_mut() {
                    if pointwise {
                        let dxg = &mut dx[xoff..xoff + rows * plane];
                        gemm(rows, cout_g, plane, wg, true, dyg, false, T::zero(), dxg);
                    } else {
                        gemm(rows, cout_g, plane, wg, true, dyg, false, T::zero(), &mut cols);
                        self.col2im(&cols, &mut dx[xoff..]);
                    }
                }
            }
        }
        [dx, dw, db]
    }
}

/// Reference convolution by direct summation over every tap.
pub fn conv2d_direct<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let geo = Geometry::new(input.dims(), weight.dims(), bias, spec)?;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let (cin_g, cout_g) = (geo.cin_g(), geo.cout_g());
    Ok(Tensor::from_fn(geo.out_dims(), |[n, co, oy, ox]| {
        let g = co / cout_g;
        let mut acc = bias.map_or(T::zero(), |b| b.data()[co]);
        for ci in 0..cin_g {
            for ky in 0..geo.kh {
                let iy = (oy * sh + ky) as isize - ph as isize;
                if iy < 0 || iy >= geo.h as isize {
                    continue;
                }
                for kx in 0..geo.kw {
                    let ix = (ox * sw + kx) as isize - pw as isize;
                    if ix < 0 || ix >= geo.w as isize {
                        continue;
                    }
                    acc = acc
                        + input.at([n, g * cin_g + ci, iy as usize, ix as usize])
                            * weight.at([co, ci, ky, kx]);
                }
            }
        }
        acc
    }))
}

/// Patch-matrix convolution without a tape.
pub fn conv2d_im2col<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let geo = Geometry::new(input.dims(), weight.dims(), bias, spec)?;
    Ok(geo.forward(input.data(), weight.data(), bias.map(|b| b.data())))
}

impl<T: Scalar> Graph<T> {
    /// `weight` is `(Cout, Cin/groups, Kh, Kw)`; `bias` holds `Cout` entries
    /// in any dims.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    ) -> Result<Var> {
        let geo = Geometry::new(
            self.dims(input),
            self.dims(weight),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        let out = geo.forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let (xv, wv) = (self.shared(input), self.shared(weight));
        let (xd, wd) = (xv.dims(), wv.dims());
        let bd = bias.map(|b| self.dims(b));
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push("conv2d", out, parents, move || {
            Box::new(move |g: &Tensor<T>, needs: &[bool]| {
                let need_b = needs.get(2).copied().unwrap_or(false);
                let [dx, dw, db] =
                    geo.backward(xv.data(), wv.data(), g.data(), [needs[0], needs[1], need_b]);
                let mut grads = vec![
                    dx.map(|d| Tensor::from_vec(xd, d).expect("input dims")),
                    dw.map(|d| Tensor::from_vec(wd, d).expect("weight dims")),
                ];
                if let Some(bd) = bd {
                    grads.push(db.map(|d| Tensor::from_vec(bd, d).expect("bias dims")));
                }
                grads
            })
        }))
    }
}
