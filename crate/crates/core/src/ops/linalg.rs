use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Scalar, Tensor};

impl<T: Scalar> Graph<T> {
    /// Plain matrix product of `(1,1,M,K)` and `(1,1,K,N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad[0] * ad[1] != 1 || bd[0] * bd[1] != 1 {
            return Err(shape_err!("matmul expects matrices, got {:?} and {:?}", ad, bd));
        }
        self.bmm(a, b, false, false)
    }

    /// Batched product over the leading two axes: `op(a) · op(b)`, where
    /// `op` transposes the trailing two axes when its flag is set.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad[..2] != bd[..2] {
            return Err(shape_err!("batch axes differ: {:?} vs {:?}", ad, bd));
        }
        let (m, k) = if ta { (ad[3], ad[2]) } else { (ad[2], ad[3]) };
        let (k2, n) = if tb { (bd[3], bd[2]) } else { (bd[2], bd[3]) };
        if k != k2 {
            return Err(shape_err!("inner extents differ: {k} vs {k2}"));
        }
        let batch = ad[0] * ad[1];
        let out_dims = [ad[0], ad[1], m, n];
        let mut out = Tensor::zeros(out_dims);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let o = out.data_mut();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    ta,
                    &bv[i * k * n..],
                    tb,
                    T::zero(),
                    &mut o[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let (av, bv) = (self.shared(a), self.shared(b));
        Ok(self.push("bmm", out, vec![a, b], move || {
            Box::new(move |g: &Tensor<T>, needs: &[bool]| {
                let gd = g.data();
                let da = needs[0].then(|| {
                    let mut da = Tensor::zeros(ad);
                    let d = da.data_mut();
                    for i in 0..batch {
                        let gi = &gd[i * m * n..];
                        let bi = &bv.data()[i * k * n..];
                        let di = &mut d[i * m * k..(i + 1) * m * k];
                        if ta {
                            gemm(k, n, m, bi, tb, gi, true, T::zero(), di);
                        } else {
                            gemm(m, n, k, gi, false, bi, !tb, T::zero(), di);
                        }
                    }
                    da
                });
                let db = needs[1].then(|| {
                    let mut db = Tensor::zeros(bd);
                    let d = db.data_mut();
                    for i in 0..batch {
                        let gi = &gd[i * m * n..];
                        let ai = &av.data()[i * m * k..];
                        let di = &mut d[i * k * n..(i + 1) * k * n];
                        if tb {
                            gemm(n, m, k, gi, true, ai, ta, T::zero(), di);
                        } else {
                            gemm(k, m, n, ai, !ta, gi, false, T::zero(), di);
                        }
                    }
                    db
                });
                vec![da, db]
            })
        }))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let dims = self.dims(x);
        let w = dims[3].max(1);
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(w) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let y = std::rc::Rc::new(out.clone());
        self.push("softmax", out, vec![x], move || {
            Box::new(move |g: &Tensor<T>, _: &[bool]| {
                let mut dx = Tensor::zeros(dims);
                for ((d, yr), gr) in dx
                    .data_mut()
                    .chunks_mut(w)
                    .zip(y.data().chunks(w))
                    .zip(g.data().chunks(w))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((dv, &yv), &gv) in d.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                vec![Some(dx)]
            })
        })
    }
}
