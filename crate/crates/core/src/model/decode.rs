//! Head-map decoding and non-maximum suppression.

use crate::bbox::{iou, BBox, Detection};
use crate::error::{shape_err, Error, Result};
use crate::model::config::ModelConfig;
use crate::ops::sigmoid;
use crate::tensor::{Scalar, Tensor};

pub const FIELD_OBJ: usize = 4;
pub const FIELD_CLS: usize = 5;

/// Box for one anchor at grid cell `(gx, gy)` from its raw offsets.
pub fn decode_box(t: [f64; 4], anchor: (f64, f64), gx: usize, gy: usize, stride: f64) -> BBox {
    let s = t.map(sigmoid);
    BBox {
        cx: (s[0] * 2.0 - 0.5 + gx as f64) * stride,
        cy: (s[1] * 2.0 - 0.5 + gy as f64) * stride,
        w: anchor.0 * (s[2] * 2.0).powi(2),
        h: anchor.1 * (s[3] * 2.0).powi(2),
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Inverse of [`decode_box`]. `None` when the box cannot be reached from
/// that cell and anchor.
pub fn encode_box(b: &BBox, anchor: (f64, f64), gx: usize, gy: usize, stride: f64) -> Option<[f64; 4]> {
    let sx = (b.cx / stride - gx as f64 + 0.5) / 2.0;
    let sy = (b.cy / stride - gy as f64 + 0.5) / 2.0;
    let sw = (b.w / anchor.0).sqrt() / 2.0;
    let sh = (b.h / anchor.1).sqrt() / 2.0;
    let all = [sx, sy, sw, sh];
    all.iter()
        .all(|&p| p > 0.0 && p < 1.0)
        .then(|| all.map(logit))
}

fn check_threshold(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
    }
}

/// Greedy per-class suppression. Input order defines priority among equal
/// scores; output is sorted by descending score.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Decodes every image of a raw head map into detections.
pub fn decode_detections<T: Scalar>(
    raw: &Tensor<T>,
    conf_thresh: f64,
    nms_iou: f64,
    cfg: &ModelConfig,
) -> Result<Vec<Vec<Detection>>> {
    check_threshold("confidence threshold", conf_thresh)?;
    check_threshold("NMS IoU threshold", nms_iou)?;
    let [n, c, gh, gw] = raw.dims();
    let per = cfg.anchor_channels();
    if c != cfg.head_channels() {
        return Err(shape_err!("head map has {c} channels, config expects {}", cfg.head_channels()));
    }
    let stride = cfg.head_stride as f64;
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let mut dets = Vec::new();
        for (a, &anchor) in cfg.anchors.iter().enumerate() {
            let ch = |f: usize| a * per + f;
            for gy in 0..gh {
                for gx in 0..gw {
                    let at = |f: usize| raw.at([b, ch(f), gy, gx]).f64();
                    let obj = sigmoid(at(FIELD_OBJ));
                    let (class_id, cls) = (0..cfg.num_classes)
                        .map(|k| (k, sigmoid(at(FIELD_CLS + k))))
                        .fold((0, f64::NEG_INFINITY), |best, cur| {
                            if cur.1 > best.1 {
                                cur
                            } else {
                                best
                            }
                        });
                    let score = obj * cls;
                    if score < conf_thresh {
                        continue;
                    }
                    let t = [at(0), at(1), at(2), at(3)];
                    dets.push(Detection {
                        bbox: decode_box(t, anchor, gx, gy, stride),
                        class_id,
                        score,
                    });
                }
            }
        }
        out.push(nms(dets, nms_iou));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            input: (64, 64),
            anchors: vec![(16.0, 16.0), (32.0, 24.0)],
            num_classes: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn cold_map_yields_nothing() {
        let c = cfg();
        let raw = Tensor::<f32>::full([1, c.head_channels(), 2, 2], -40.0);
        let dets = decode_detections(&raw, 0.001, 0.45, &c).unwrap();
        assert!(dets[0].is_empty());
    }

    #[test]
    fn single_hot_cell() {
        let c = cfg();
        let mut raw = Tensor::<f32>::full([1, c.head_channels(), 2, 2], -40.0);
        let per = c.anchor_channels();
        for f in 0..4 {
            raw.set([0, per + f, 1, 0], 0.0);
        }
        raw.set([0, per + FIELD_OBJ, 1, 0], 40.0);
        raw.set([0, per + FIELD_CLS + 1, 1, 0], 40.0);
        let dets = decode_detections(&raw, 0.25, 0.45, &c).unwrap();
        assert_eq!(dets[0].len(), 1);
        let d = dets[0][0];
        assert_eq!(d.class_id, 1);
        assert_eq!((d.bbox.cx, d.bbox.cy), (16.0, 48.0));
        assert_eq!((d.bbox.w, d.bbox.h), (32.0, 24.0));
    }

    #[test]
    fn thresholds_are_validated() {
        let c = cfg();
        let raw = Tensor::<f32>::zeros([1, c.head_channels(), 2, 2]);
        assert!(decode_detections(&raw, 1.5, 0.45, &c).is_err());
        assert!(decode_detections(&raw, 0.5, -0.1, &c).is_err());
    }

    #[test]
    fn encode_inverts_decode() {
        let b = BBox::new(41.3, 17.9, 22.0, 31.5);
        let t = encode_box(&b, (16.0, 16.0), 1, 0, 32.0).unwrap();
        let d = decode_box(t, (16.0, 16.0), 1, 0, 32.0);
        assert!((d.cx - b.cx).abs() < 1e-9 && (d.w - b.w).abs() < 1e-9);
        assert!(encode_box(&b, (2.0, 2.0), 1, 0, 32.0).is_none());
    }
}
