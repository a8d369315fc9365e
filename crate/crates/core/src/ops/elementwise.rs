use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
        }
    }
}

/// Strides for reading `b` while iterating over `a`'s index space; a zero
/// stride marks a broadcast axis.
fn broadcast_strides(a: [usize; 4], b: [usize; 4]) -> Result<[usize; 4]> {
    let mut strides = [0; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        if b[i] == a[i] {
            strides[i] = acc;
        } else if b[i] != 1 {
            return Err(shape_err!("cannot broadcast {:?} onto {:?}", b, a));
        }
        acc *= b[i];
    }
    Ok(strides)
}

fn for_each_broadcast(dims: [usize; 4], strides: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let mut i = 0;
    for n in 0..dims[0] {
        for c in 0..dims[1] {
            let base = n * strides[0] + c * strides[1];
            for h in 0..dims[2] {
                let row = base + h * strides[2];
                for w in 0..dims[3] {
                    f(i, row + w * strides[3]);
                    i += 1;
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// `a + b`, with `b` broadcast over any of its unit axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let ad = self.dims(a);
        let bd = self.dims(b);
        let strides = broadcast_strides(ad, bd)?;
        let mut out = self.value(a).clone();
        {
            let bv = self.value(b).data();
            let o = out.data_mut();
            for_each_broadcast(ad, strides, |i, j| o[i] = o[i] + bv[j]);
        }
        Ok(self.push("add", out, vec![a, b], move || {
            Box::new(move |g: &Tensor<T>, needs: &[bool]| {
                let gb = needs[1].then(|| {
                    let mut gb = Tensor::zeros(bd);
                    let d = gb.data_mut();
                    let gd = g.data();
                    for_each_broadcast(ad, strides, |i, j| d[j] = d[j] + gd[i]);
                    gb
                });
                vec![needs[0].then(|| g.clone()), gb]
            })
        }))
    }

    /// `a ⊙ b`, with `b` broadcast over any of its unit axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ad = self.dims(a);
        let bd = self.dims(b);
        let strides = broadcast_strides(ad, bd)?;
        let mut out = self.value(a).clone();
        {
            let bv = self.value(b).data();
            let o = out.data_mut();
            for_each_broadcast(ad, strides, |i, j| o[i] = o[i] * bv[j]);
        }
        let (av, bv) = (self.shared(a), self.shared(b));
        Ok(self.push("mul", out, vec![a, b], move || {
            Box::new(move |g: &Tensor<T>, needs: &[bool]| {
                let gd = g.data();
                let ga = needs[0].then(|| {
                    let mut ga = Tensor::zeros(ad);
                    let d = ga.data_mut();
                    let b = bv.data();
                    for_each_broadcast(ad, strides, |i, j| d[i] = gd[i] * b[j]);
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = Tensor::zeros(bd);
                    let d = gb.data_mut();
                    let a = av.data();
                    for_each_broadcast(ad, strides, |i, j| d[j] = d[j] + gd[i] * a[i]);
                    gb
                });
                vec![ga, gb]
            })
        }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push("scale", out, vec![a], move || {
            Box::new(move |g: &Tensor<T>, _: &[bool]| vec![Some(g.map(|v| v * s))])
        })
    }

    /// Sum of all elements, as a `(1,1,1,1)` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let dims = self.dims(a);
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), vec![a], move || {
            Box::new(move |g: &Tensor<T>, _: &[bool]| {
                vec![Some(Tensor::full(dims, g.data()[0]))]
            })
        })
    }

    /// `sum(a ⊙ weights)` for a fixed weight tensor; the usual probe for
    /// turning a block output into a scalar objective.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.dims() != self.dims(a) {
            return Err(shape_err!(
                "weights {:?} do not match {:?}",
                weights.dims(),
                self.dims(a)
            ));
        }
        let w = self.constant(weights);
        let prod = self.mul(a, w)?;
        Ok(self.sum(prod))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let av = self.shared(a);
        let name = match kind {
            Activation::Silu => "silu",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        };
        if kind == Activation::Relu {
            let out = av.map(|v| kind.apply(v));
            return self.push(name, out, vec![a], move || {
                Box::new(move |g: &Tensor<T>, _: &[bool]| {
                    let data = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&g, &x)| g * kind.derivative(x))
                        .collect();
                    vec![Some(Tensor::from_vec(g.dims(), data).expect("same dims"))]
                })
            });
        }
        // Silu and sigmoid share the saved logistic values.
        let sig = av.map(sigmoid);
        let out = match kind {
            Activation::Silu => {
                let data = av.data().iter().zip(sig.data()).map(|(&x, &s)| x * s).collect();
                Tensor::from_vec(av.dims(), data).expect("same dims")
            }
            _ => sig.clone(),
        };
        self.push(name, out, vec![a], move || {
            Box::new(move |g: &Tensor<T>, _: &[bool]| {
                let gd = g.data();
                let data = match kind {
                    Activation::Silu => gd
                        .iter()
                        .zip(sig.data())
                        .zip(av.data())
                        .map(|((&g, &s), &x)| g * (s + x * s * (T::one() - s)))
                        .collect(),
                    _ => gd
                        .iter()
                        .zip(sig.data())
                        .map(|(&g, &s)| g * s * (T::one() - s))
                        .collect(),
                };
                vec![Some(Tensor::from_vec(g.dims(), data).expect("same dims"))]
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Silu.apply(0.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
        // 64-bit evaluation of x·σ(x) at 1: 0.7310585786300049
        assert!((Activation::Silu.apply(1.0f32) - 0.731059).abs() <= 1e-5);
        assert!((sigmoid(-800.0f64)).is_finite());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn([2, 3, 2, 2], |i| i[3] as f64 - 0.3));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn silu_gradient_at_zero_is_half() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([1, 2, 3, 3]));
        let y = g.activation(x, Activation::Silu);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros([2, 3, 4, 4]));
        let b = g.leaf(Tensor::zeros([2, 3, 1, 1]));
        let y = g.add(a, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(b).unwrap().data().iter().all(|&v| v == 16.0));
    }

    #[test]
    fn broadcast_rejects_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros([1, 3, 4, 4]));
        let b = g.leaf(Tensor::zeros([1, 2, 1, 1]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros([1, 3, 4, 4]));
        let y = g.scale(a, 2.0);
        assert!(matches!(g.backward(y), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::ones([1, 1, 2, 2]));
        let b = g.leaf(Tensor::ones([1, 1, 3, 3]));
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, b), Tensor::zeros([1, 1, 3, 3]));
    }
}
