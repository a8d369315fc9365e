//! Batch normalization (per channel over N·H·W) and layer normalization
//! (per pixel over the channel vector).

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn unit(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros([channels, 1, 1, 1]),
            var: Tensor::ones([channels, 1, 1, 1]),
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("normalization eps must be positive, got {eps}")))
    }
}

impl<T: Scalar> Graph<T> {
    /// Batch normalization. In train mode the batch statistics are used and
    /// the updated running statistics are returned; infer mode uses
    /// `running` and returns `None`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mode: Mode,
        running: &BatchNormStats<T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchNormStats<T>>)> {
        check_eps(eps)?;
        let [n, c, h, w] = self.dims(x);
        for (name, v) in [("scale", scale), ("shift", shift)] {
            if self.value(v).numel() != c {
                return Err(shape_err!("batch norm {name} must have {c} entries"));
            }
        }
        if running.mean.numel() != c || running.var.numel() != c {
            return Err(shape_err!("running stats must have {c} entries"));
        }
        let hw = h * w;
        let count = n * hw;
        if count == 0 {
            return Err(shape_err!("batch norm over empty batch"));
        }
        let xs = self.value(x).data();
        let gamma = self.value(scale).data().to_vec();
        let beta = self.value(shift).data().to_vec();
        let eps_t = T::lit(eps);

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv = T::one() / T::lit(count as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s = s + xs[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                    }
                    let m = s * inv;
                    let mut q = T::zero();
                    for b in 0..n {
                        for &v in &xs[(b * c + ch) * hw..][..hw] {
                            q = q + (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q * inv;
                }
                (mean, var)
            }
            Mode::Infer => (running.mean.data().to_vec(), running.var.data().to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();

        let mut xhat = Tensor::zeros([n, c, h, w]);
        let mut out = Tensor::zeros([n, c, h, w]);
        {
            let xh = xhat.data_mut();
            let o = out.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    for i in off..off + hw {
                        xh[i] = (xs[i] - mean[ch]) * inv_std[ch];
                        o[i] = gamma[ch] * xh[i] + beta[ch];
                    }
                }
            }
        }

        let updated = (mode == Mode::Train).then(|| {
            let m = T::lit(BN_MOMENTUM);
            let keep = T::one() - m;
            let unbias = if count > 1 {
                T::lit(count as f64 / (count as f64 - 1.0))
            } else {
                T::one()
            };
            let rm = running
                .mean
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| keep * r + m * b)
                .collect();
            let rv = running
                .var
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &b)| keep * r + m * b * unbias)
                .collect();
            BatchNormStats {
                mean: Tensor::from_vec(running.mean.dims(), rm).expect("dims"),
                var: Tensor::from_vec(running.var.dims(), rv).expect("dims"),
            }
        });

        let (sd, bd) = (self.dims(scale), self.dims(shift));
        let y = self.push("batch_norm", out, vec![x, scale, shift], move || {
            Box::new(move |g: &Tensor<T>, needs: &[bool]| {
                let gd = g.data();
                let xh = xhat.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] = dgamma[ch] + gd[i] * xh[i];
                            dbeta[ch] = dbeta[ch] + gd[i];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    let d = dx.data_mut();
                    let inv_count = T::one() / T::lit(count as f64);
                    for ch in 0..c {
                        let k = gamma[ch] * inv_std[ch];
                        match mode {
                            Mode::Train => {
                                let mean_g = dbeta[ch] * inv_count;
                                let mean_gx = dgamma[ch] * inv_count;
                                for b in 0..n {
                                    let off = (b * c + ch) * hw;
                                    for i in off..off + hw {
                                        d[i] = k * (gd[i] - mean_g - xh[i] * mean_gx);
                                    }
                                }
                            }
                            Mode::Infer => {
                                for b in 0..n {
                                    let off = (b * c + ch) * hw;
                                    for i in off..off + hw {
                                        d[i] = k * gd[i];
                                    }
                                }
                            }
                        }
                    }
                    dx
                });
                vec![
                    dx,
                    Some(Tensor::from_vec(sd, dgamma).expect("scale dims")),
                    Some(Tensor::from_vec(bd, dbeta).expect("shift dims")),
                ]
            })
        });
        Ok((y, updated))
    }

    /// Layer normalization of each pixel's channel vector.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        check_eps(eps)?;
        let [n, c, h, w] = self.dims(x);
        for (name, v) in [("scale", scale), ("shift", shift)] {
            if self.value(v).numel() != c {
                return Err(shape_err!("layer norm {name} must have {c} entries"));
            }
        }
        if c == 0 {
            return Err(shape_err!("layer norm over zero channels"));
        }
        let hw = h * w;
        let xs = self.value(x).data();
        let gamma = self.value(scale).data().to_vec();
        let beta = self.value(shift).data().to_vec();
        let eps_t = T::lit(eps);
        let inv_c = T::one() / T::lit(c as f64);
        let mut xhat = Tensor::zeros([n, c, h, w]);
        let mut out = Tensor::zeros([n, c, h, w]);
        let mut inv_std = vec![T::zero(); n * hw];
        {
            let xh = xhat.data_mut();
            let o = out.data_mut();
            for b in 0..n {
                for p in 0..hw {
                    let at = |ch: usize| (b * c + ch) * hw + p;
                    let m = (0..c).map(|ch| xs[at(ch)]).sum::<T>() * inv_c;
                    let v = (0..c).map(|ch| (xs[at(ch)] - m) * (xs[at(ch)] - m)).sum::<T>() * inv_c;
                    let is = T::one() / (v + eps_t).sqrt();
                    inv_std[b * hw + p] = is;
                    for ch in 0..c {
                        let i = at(ch);
                        xh[i] = (xs[i] - m) * is;
                        o[i] = gamma[ch] * xh[i] + beta[ch];
                    }
                }
            }
        }
        let (sd, bd) = (self.dims(scale), self.dims(shift));
        Ok(self.push("layer_norm", out, vec![x, scale, shift], move || {
            Box::new(move |g: &Tensor<T>, needs: &[bool]| {
                let gd = g.data();
                let xh = xhat.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = needs[0].then(|| Tensor::zeros([n, c, h, w]));
                for b in 0..n {
                    for p in 0..hw {
                        let at = |ch: usize| (b * c + ch) * hw + p;
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for ch in 0..c {
                            let i = at(ch);
                            dgamma[ch] = dgamma[ch] + gd[i] * xh[i];
                            dbeta[ch] = dbeta[ch] + gd[i];
                            let dxh = gd[i] * gamma[ch];
                            mean_d = mean_d + dxh;
                            mean_dx = mean_dx + dxh * xh[i];
                        }
                        if let Some(dx) = dx.as_mut() {
                            mean_d = mean_d * inv_c;
                            mean_dx = mean_dx * inv_c;
                            let is = inv_std[b * hw + p];
                            let d = dx.data_mut();
                            for ch in 0..c {
                                let i = at(ch);
                                d[i] = is * (gd[i] * gamma[ch] - mean_d - xh[i] * mean_dx);
                            }
                        }
                    }
                }
                vec![
                    dx,
                    Some(Tensor::from_vec(sd, dgamma).expect("scale dims")),
                    Some(Tensor::from_vec(bd, dbeta).expect("shift dims")),
                ]
            })
        }))
    }
}
