//! Detection metrics: greedy matching, all-points AP, mAP over IoU
//! thresholds, operating-point precision/recall and PR curves.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::{iou, Detection, GtBox};
use crate::data::{stack_images, Sample};
use crate::error::{Error, Result};
use crate::model::{decode_detections, DtNetModel};

pub const MATCH_IOU: f64 = 0.5;

/// `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Detections below this score are discarded before matching.
    pub conf_thresh: f64,
    pub nms_iou: f64,
    /// Score cutoff for the reported precision and recall.
    pub operating_conf: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conf_thresh: 0.001,
            nms_iou: 0.45,
            operating_conf: 0.25,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    /// Monotone-envelope precision.
    pub precision: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class_id: usize,
    pub num_gt: usize,
    pub points: Vec<PrPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    /// AP at IoU 0.5 per class; `None` for classes without ground truth.
    pub ap50: Vec<Option<f64>>,
    pub map50: f64,
    pub map5095: f64,
    pub pr_curves: Vec<PrCurve>,
}

/// Descending score; exact ties fall back to box content so the order does
/// not depend on where a detection came from.
fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
}

/// Ranks `(image, detection)` pairs and greedily matches each to the
/// highest-IoU unmatched box of its class in the same image. Returns
/// `(score, is_true_positive)` in rank order.
fn match_ranked(mut dets: Vec<(usize, Detection)>, gts: &[Vec<GtBox>], iou_thresh: f64) -> Vec<(f64, bool)> {
    dets.sort_by(|a, b| rank(&a.1, &b.1));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    dets.into_iter()
        .map(|(img, d)| {
            let best = gts[img]
                .iter()
                .enumerate()
                .filter(|(j, g)| g.class_id == d.class_id && !used[img][*j])
                .map(|(j, g)| (j, iou(&d.bbox, &g.bbox)))
                .filter(|&(_, o)| o >= iou_thresh)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((j, _)) = best {
                used[img][j] = true;
            }
            (d.score, best.is_some())
        })
        .collect()
}

/// Raw `(recall, precision)` after each ranked detection.
fn cumulative(matches: &[(f64, bool)], num_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    matches
        .iter()
        .enumerate()
        .map(|(i, &(_, hit))| {
            tp += hit as usize;
            (tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Running maximum of precision from the right.
fn envelope(curve: &[(f64, f64)]) -> Vec<f64> {
    let mut env = vec![0.0; curve.len()];
    let mut best = 0.0f64;
    for i in (0..curve.len()).rev() {
        best = best.max(curve[i].1);
        env[i] = best;
    }
    env
}

fn area(curve: &[(f64, f64)]) -> f64 {
    let env = envelope(curve);
    let mut prev = 0.0;
    let mut ap = 0.0;
    for (i, &(r, _)) in curve.iter().enumerate() {
        ap += (r - prev) * env[i];
        prev = r;
    }
    ap
}

fn count_class(gts: &[Vec<GtBox>], class_id: usize) -> usize {
    gts.iter().flatten().filter(|g| g.class_id == class_id).count()
}

fn class_matches(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], class_id: usize, iou_thresh: f64) -> Vec<(f64, bool)> {
    let pool = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(|d| d.class_id == class_id).map(move |d| (i, *d)))
        .collect();
    match_ranked(pool, gts, iou_thresh)
}

/// AP of one class over a set of images; `None` without ground truth.
pub fn class_ap(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], class_id: usize, iou_thresh: f64) -> Option<f64> {
    let num_gt = count_class(gts, class_id);
    (num_gt > 0).then(|| area(&cumulative(&class_matches(dets, gts, class_id, iou_thresh), num_gt)))
}

/// AP of a single image's detections, matched within classes and ranked
/// together. 0 when there is no ground truth.
pub fn compute_ap(dets: &[Detection], gts: &[GtBox], iou_thresh: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let pool = dets.iter().map(|d| (0, *d)).collect();
    let m = match_ranked(pool, &[gts.to_vec()], iou_thresh);
    area(&cumulative(&m, gts.len()))
}

fn pr_curve(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], class_id: usize) -> PrCurve {
    let num_gt = count_class(gts, class_id);
    let m = class_matches(dets, gts, class_id, MATCH_IOU);
    let curve = cumulative(&m, num_gt);
    let env = envelope(&curve);
    let mut points = vec![PrPoint {
        recall: 0.0,
        precision: 1.0,
        score: 1.0,
    }];
    for i in 0..m.len() {
        // One point per distinct score cutoff.
        if i + 1 < m.len() && m[i + 1].0 == m[i].0 {
            continue;
        }
        points.push(PrPoint {
            recall: curve[i].0,
            precision: env[i],
            score: m[i].0,
        });
    }
    PrCurve {
        class_id,
        num_gt,
        points,
    }
}

fn mean_present(aps: impl Iterator<Item = Option<f64>>) -> f64 {
    let present: Vec<f64> = aps.flatten().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Metrics for per-image detections against per-image ground truth.
pub fn evaluate_detections(
    dets: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    num_classes: usize,
    operating_conf: f64,
) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::Usage(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    if let Some(g) = gts.iter().flatten().find(|g| g.class_id >= num_classes) {
        return Err(Error::Data(format!("class {} exceeds {num_classes} classes", g.class_id)));
    }
    let ap50: Vec<Option<f64>> = (0..num_classes).map(|k| class_ap(dets, gts, k, MATCH_IOU)).collect();
    let map50 = mean_present(ap50.iter().copied());
    let map5095 = iou_thresholds()
        .iter()
        .map(|&t| mean_present((0..num_classes).map(|k| class_ap(dets, gts, k, t))))
        .sum::<f64>()
        / 10.0;

    let confident = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(|d| d.score >= operating_conf).map(move |d| (i, *d)))
        .collect();
    let m = match_ranked(confident, gts, MATCH_IOU);
    let tp = m.iter().filter(|x| x.1).count() as f64;
    let total_gt = gts.iter().map(Vec::len).sum::<usize>();
    let precision = if m.is_empty() { 0.0 } else { tp / m.len() as f64 };
    let recall = if total_gt == 0 { 0.0 } else { tp / total_gt as f64 };

    let pr_curves = (0..num_classes)
        .filter(|&k| count_class(gts, k) > 0)
        .map(|k| pr_curve(dets, gts, k))
        .collect();
    Ok(EvalReport {
        precision,
        recall,
        ap50,
        map50,
        map5095,
        pr_curves,
    })
}

/// Raw detections of `model` on every sample, decoded and suppressed.
pub fn predict_detections(model: &DtNetModel<f32>, samples: &[Sample], cfg: &EvalConfig) -> Result<Vec<Vec<Detection>>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in idx.chunks(cfg.batch_size) {
        let raw = model.predict(&stack_images(samples, chunk)?)?;
        out.extend(decode_detections(&raw, cfg.conf_thresh, cfg.nms_iou, &model.config)?);
    }
    Ok(out)
}

pub fn evaluate(model: &DtNetModel<f32>, samples: &[Sample], cfg: &EvalConfig) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let dets = predict_detections(model, samples, cfg)?;
    let gts: Vec<Vec<GtBox>> = samples.iter().map(|s| s.boxes.clone()).collect();
    evaluate_detections(&dets, &gts, model.config.num_classes, cfg.operating_conf)
}

/// CSV text of every class's PR curve, sorted by class then recall.
pub fn pr_csv(report: &EvalReport) -> String {
    let mut s = String::from("class,recall,precision,score\n");
    for c in &report.pr_curves {
        for p in &c.points {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", c.class_id, p.recall, p.precision, p.score);
        }
    }
    s
}

pub fn export_pr_curve(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, pr_csv(report))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BBox;

    fn gt(cx: f64, cy: f64, class_id: usize) -> GtBox {
        GtBox {
            bbox: BBox::new(cx, cy, 10.0, 10.0),
            class_id,
        }
    }

    fn det(cx: f64, cy: f64, class_id: usize, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(cx, cy, 10.0, 10.0),
            class_id,
            score,
        }
    }

    #[test]
    fn single_hit_and_single_miss() {
        let g = [gt(10.0, 10.0, 0)];
        assert_eq!(compute_ap(&[det(10.5, 10.0, 0, 0.9)], &g, 0.5), 1.0);
        assert_eq!(compute_ap(&[], &g, 0.5), 0.0);
    }

    #[test]
    fn tp_fp_tp_ranking() {
        let g = [gt(10.0, 10.0, 0), gt(50.0, 50.0, 0)];
        let d = [det(10.0, 10.0, 0, 0.9), det(90.0, 90.0, 0, 0.8), det(50.0, 50.0, 0, 0.7)];
        // Envelope: precision 1 up to recall 0.5, then 2/3 up to recall 1.
        assert!((compute_ap(&d, &g, 0.5) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn wrong_class_never_matches() {
        let g = [gt(10.0, 10.0, 0)];
        assert_eq!(compute_ap(&[det(10.0, 10.0, 1, 0.9)], &g, 0.5), 0.0);
    }

    #[test]
    fn oracle_detector_scores_one() {
        let gts = vec![vec![gt(10.0, 10.0, 0), gt(40.0, 40.0, 1)], vec![gt(20.0, 30.0, 1)]];
        let dets: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| g.iter().map(|g| Detection { bbox: g.bbox, class_id: g.class_id, score: 0.9 }).collect())
            .collect();
        let r = evaluate_detections(&dets, &gts, 2, 0.25).unwrap();
        assert_eq!((r.map50, r.map5095, r.precision, r.recall), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn no_predictions_scores_zero() {
        let gts = vec![vec![gt(10.0, 10.0, 0)]];
        let r = evaluate_detections(&[vec![]], &gts, 2, 0.25).unwrap();
        assert_eq!((r.map50, r.map5095, r.precision, r.recall), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.ap50, vec![Some(0.0), None]);
        assert_eq!(pr_csv(&r), "class,recall,precision,score\n0,0.000000,1.000000,1.000000\n");
    }

    #[test]
    fn perfect_detector_csv() {
        let gts = vec![vec![gt(10.0, 10.0, 0)]];
        let r = evaluate_detections(&[vec![det(10.0, 10.0, 0, 0.8)]], &gts, 1, 0.25).unwrap();
        assert_eq!(
            pr_csv(&r),
            "class,recall,precision,score\n0,0.000000,1.000000,1.000000\n0,1.000000,1.000000,0.800000\n"
        );
    }

    #[test]
    fn operating_point_counts() {
        let gts = vec![vec![gt(10.0, 10.0, 0), gt(50.0, 50.0, 0)]];
        let dets = vec![vec![det(10.0, 10.0, 0, 0.9), det(80.0, 80.0, 0, 0.5), det(50.0, 50.0, 0, 0.1)]];
        let r = evaluate_detections(&dets, &gts, 1, 0.25).unwrap();
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 0.5);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(evaluate_detections(&[vec![], vec![]], &[vec![]], 1, 0.25).is_err());
    }
}
