//! Composite detection loss over the raw head map.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::bbox::{BBox, GtBox};
use crate::error::{shape_err, Error, Result};
use crate::model::{ModelConfig, FIELD_CLS, FIELD_OBJ};
use crate::ops::sigmoid;
use crate::tensor::{Scalar, Tensor};
use crate::train::dual::Dual4;

const CIOU_EPS: f64 = 1e-9;
/// Slack allowed when checking that a box lies inside the image.
const BOUNDS_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub box_w: f64,
    pub obj: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            box_w: 0.05,
            obj: 1.0,
            cls: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "box")]
    pub box_loss: f64,
    pub obj: f64,
    pub cls: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.box_loss, self.obj, self.cls, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// One positive: a ground-truth box bound to an anchor at a grid cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub image: usize,
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
    pub gt: GtBox,
}

/// IoU of two boxes sharing a center.
fn shape_iou(w: f64, h: f64, anchor: (f64, f64)) -> f64 {
    let inter = w.min(anchor.0) * h.min(anchor.1);
    inter / (w * h + anchor.0 * anchor.1 - inter)
}

/// Binds every ground-truth box to its center cell and best-matching anchor.
/// When that slot is already taken by an earlier box the next best anchor is
/// used; a box that finds no free slot is dropped.
pub fn assign_targets(targets: &[Vec<GtBox>], cfg: &ModelConfig) -> Result<Vec<Assignment>> {
    let (gh, gw) = cfg.grid();
    let stride = cfg.head_stride as f64;
    let (img_h, img_w) = (cfg.input.0 as f64, cfg.input.1 as f64);
    let mut out: Vec<Assignment> = Vec::new();
    for (image, boxes) in targets.iter().enumerate() {
        for gt in boxes {
            let b = gt.bbox;
            let (x0, y0, x1, y1) = b.corners();
            let inside = x0 >= -BOUNDS_TOL
                && y0 >= -BOUNDS_TOL
                && x1 <= img_w + BOUNDS_TOL
                && y1 <= img_h + BOUNDS_TOL;
            if !(b.w > 0.0 && b.h > 0.0 && inside) {
                return Err(Error::Data(format!(
                    "box {b:?} of image {image} lies outside the {img_w}x{img_h} image"
                )));
            }
            if gt.class_id >= cfg.num_classes {
                return Err(Error::Data(format!(
                    "class {} of image {image} exceeds {} classes",
                    gt.class_id, cfg.num_classes
                )));
            }
            let gx = ((b.cx / stride).floor().max(0.0) as usize).min(gw - 1);
            let gy = ((b.cy / stride).floor().max(0.0) as usize).min(gh - 1);
            let mut order: Vec<usize> = (0..cfg.anchors.len()).collect();
            order.sort_by(|&a, &c| {
                shape_iou(b.w, b.h, cfg.anchors[c]).total_cmp(&shape_iou(b.w, b.h, cfg.anchors[a]))
            });
            let free = order.into_iter().find(|&a| {
                !out.iter()
                    .any(|p| p.image == image && p.anchor == a && p.gy == gy && p.gx == gx)
            });
            if let Some(anchor) = free {
                out.push(Assignment {
                    image,
                    anchor,
                    gy,
                    gx,
                    gt: *gt,
                });
            }
        }
    }
    Ok(out)
}

fn corners(cx: Dual4, cy: Dual4, w: Dual4, h: Dual4) -> [Dual4; 4] {
    [cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5]
}

/// Complete IoU between a differentiable prediction and a fixed target.
pub fn ciou(pred: [Dual4; 4], gt: &BBox) -> Dual4 {
    let [pcx, pcy, pw, ph] = pred;
    let c = Dual4::constant;
    let (gcx, gcy, gw, gh) = (c(gt.cx), c(gt.cy), c(gt.w), c(gt.h));
    let [px0, py0, px1, py1] = corners(pcx, pcy, pw, ph);
    let [gx0, gy0, gx1, gy1] = corners(gcx, gcy, gw, gh);
    let zero = c(0.0);
    let iw = (px1.min(gx1) - px0.max(gx0)).max(zero);
    let ih = (py1.min(gy1) - py0.max(gy0)).max(zero);
    let inter = iw * ih;
    let union = pw * ph + gw * gh - inter + CIOU_EPS;
    let iou = inter / union;
    let cw = px1.max(gx1) - px0.min(gx0);
    let ch = py1.max(gy1) - py0.min(gy0);
    let diag2 = cw.sq() + ch.sq() + CIOU_EPS;
    let rho2 = (pcx - gcx).sq() + (pcy - gcy).sq();
    let v = ((gw / gh).atan() - (pw / ph).atan()).sq() * (4.0 / (PI * PI));
    let alpha = v / (v - iou + 1.0 + CIOU_EPS);
    iou - (rho2 / diag2 + v * alpha)
}

/// Predicted box for raw offsets `t` as dual numbers, one tangent per offset.
fn decode_dual(t: [f64; 4], anchor: (f64, f64), gx: usize, gy: usize, stride: f64) -> [Dual4; 4] {
    let s: [Dual4; 4] = std::array::from_fn(|i| Dual4::var(t[i], i).sigmoid());
    [
        (s[0] * 2.0 - 0.5 + gx as f64) * stride,
        (s[1] * 2.0 - 0.5 + gy as f64) * stride,
        (s[2] * 2.0).sq() * anchor.0,
        (s[3] * 2.0).sq() * anchor.1,
    ]
}

/// Binary cross-entropy on a logit, with its derivative.
fn bce_logit(x: f64, target: f64) -> (f64, f64) {
    let loss = x.max(0.0) - x * target + (-x.abs()).exp().ln_1p();
    (loss, sigmoid(x) - target)
}

/// Loss value and gradient with respect to every raw head output.
pub fn loss_and_grad(
    raw: &Tensor<f64>,
    targets: &[Vec<GtBox>],
    cfg: &ModelConfig,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Tensor<f64>)> {
    let [n, c, gh, gw] = raw.dims();
    if c != cfg.head_channels() || (gh, gw) != cfg.grid() {
        return Err(shape_err!(
            "head map {:?} does not match config ({} channels on {:?})",
            raw.dims(),
            cfg.head_channels(),
            cfg.grid()
        ));
    }
    if targets.len() != n {
        return Err(Error::Data(format!(
            "{} target lists for a batch of {n}",
            targets.len()
        )));
    }
    let assigned = assign_targets(targets, cfg)?;
    let per = cfg.anchor_channels();
    let stride = cfg.head_stride as f64;
    let k = cfg.num_classes;
    let mut grad = Tensor::<f64>::zeros(raw.dims());
    let mut positive = vec![false; n * cfg.num_anchors() * gh * gw];
    let slot = |b: usize, a: usize, y: usize, x: usize| ((b * cfg.num_anchors() + a) * gh + y) * gw + x;

    let mut box_sum = 0.0;
    let mut cls_sum = 0.0;
    let npos = assigned.len();
    for p in &assigned {
        positive[slot(p.image, p.anchor, p.gy, p.gx)] = true;
        let ch = |f: usize| p.anchor * per + f;
        let t: [f64; 4] = std::array::from_fn(|i| raw.at([p.image, ch(i), p.gy, p.gx]));
        let pred = decode_dual(t, cfg.anchors[p.anchor], p.gx, p.gy, stride);
        let term = -(ciou(pred, &p.gt.bbox) - 1.0);
        box_sum += term.v;
        let scale = weights.box_w / npos as f64;
        for (i, d) in term.d.iter().enumerate() {
            let idx = grad.offset([p.image, ch(i), p.gy, p.gx]);
            grad.data_mut()[idx] += scale * d;
        }
        for cls in 0..k {
            let target = if cls == p.gt.class_id { 1.0 } else { 0.0 };
            let idx = [p.image, ch(FIELD_CLS + cls), p.gy, p.gx];
            let (l, d) = bce_logit(raw.at(idx), target);
            cls_sum += l;
            let off = grad.offset(idx);
            grad.data_mut()[off] += weights.cls * d / (npos * k) as f64;
        }
    }

    let nobj = positive.len();
    let mut obj_sum = 0.0;
    for b in 0..n {
        for a in 0..cfg.num_anchors() {
            for y in 0..gh {
                for x in 0..gw {
                    let target = if positive[slot(b, a, y, x)] { 1.0 } else { 0.0 };
                    let idx = [b, a * per + FIELD_OBJ, y, x];
                    let (l, d) = bce_logit(raw.at(idx), target);
                    obj_sum += l;
                    let off = grad.offset(idx);
                    grad.data_mut()[off] += weights.obj * d / nobj as f64;
                }
            }
        }
    }

    let (box_loss, cls) = if npos == 0 {
        (0.0, 0.0)
    } else {
        (box_sum / npos as f64, cls_sum / (npos * k) as f64)
    };
    let obj = obj_sum / nobj as f64;
    let total = weights.box_w * box_loss + weights.obj * obj + weights.cls * cls;
    Ok((
        LossBreakdown {
            box_loss,
            obj,
            cls,
            total,
        },
        grad,
    ))
}

impl<T: Scalar> Graph<T> {
    /// Scalar detection loss node over a raw head map.
    pub fn detection_loss(
        &mut self,
        raw: Var,
        targets: &[Vec<GtBox>],
        cfg: &ModelConfig,
        weights: &LossWeights,
    ) -> Result<(Var, LossBreakdown)> {
        let (breakdown, grad) = loss_and_grad(&self.value(raw).cast(), targets, cfg, weights)?;
        let grad: Tensor<T> = grad.cast();
        let out = Tensor::scalar(T::lit(breakdown.total));
        let var = self.push("detection_loss", out, vec![raw], move || {
            Box::new(move |g: &Tensor<T>, _: &[bool]| {
                let s = g.data()[0];
                vec![Some(grad.map(|v| v * s))]
            })
        });
        Ok((var, breakdown))
    }
}
