//! Brute-force evaluator and the five-image fixture shared by the
//! evaluation tests and the acceptance run.

#![allow(dead_code)]

use dtnet_core::{BBox, Detection, GtBox};

pub const FIXTURE_CLASSES: usize = 4;

fn gt(cx: f64, cy: f64, w: f64, h: f64, class_id: usize) -> GtBox {
    GtBox { bbox: BBox::new(cx, cy, w, h), class_id }
}

fn det(cx: f64, cy: f64, w: f64, h: f64, class_id: usize, score: f64) -> Detection {
    Detection { bbox: BBox::new(cx, cy, w, h), class_id, score }
}

/// Five images, ten boxes, three classes with ground truth and a fourth
/// that only appears as a false positive.
pub fn fixture() -> (Vec<Vec<Detection>>, Vec<Vec<GtBox>>) {
    let gts = vec![
        vec![gt(20.0, 20.0, 16.0, 12.0, 0), gt(50.0, 40.0, 20.0, 20.0, 1)],
        vec![gt(30.0, 30.0, 24.0, 16.0, 0), gt(31.0, 29.0, 22.0, 18.0, 0), gt(10.0, 50.0, 8.0, 10.0, 2)],
        vec![gt(40.0, 12.0, 30.0, 14.0, 1)],
        vec![],
        vec![gt(16.0, 16.0, 12.0, 12.0, 2), gt(48.0, 48.0, 18.0, 14.0, 0), gt(30.0, 52.0, 10.0, 10.0, 1)],
    ];
    let dets = vec![
        vec![
            det(21.0, 20.5, 16.0, 12.0, 0, 0.93),
            det(49.0, 41.0, 22.0, 19.0, 1, 0.71),
            det(20.0, 21.0, 15.0, 13.0, 0, 0.44),
        ],
        vec![
            det(30.0, 30.0, 24.0, 17.0, 0, 0.88),
            det(32.0, 28.0, 21.0, 18.0, 0, 0.62),
            det(12.0, 51.0, 9.0, 11.0, 2, 0.27),
            det(55.0, 55.0, 8.0, 8.0, 3, 0.51),
        ],
        vec![det(43.0, 13.0, 26.0, 12.0, 1, 0.81), det(40.0, 12.0, 30.0, 14.0, 0, 0.36)],
        vec![det(30.0, 30.0, 10.0, 10.0, 1, 0.58), det(12.0, 12.0, 6.0, 6.0, 2, 0.12)],
        vec![
            det(16.5, 15.5, 12.0, 13.0, 2, 0.77),
            det(46.0, 49.0, 20.0, 15.0, 0, 0.66),
            det(30.0, 52.0, 14.0, 14.0, 1, 0.31),
            det(5.0, 5.0, 6.0, 6.0, 0, 0.09),
        ],
    ];
    (dets, gts)
}

/// Intersection over union from corner coordinates.
pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let corners = |x: &BBox| (x.cx - x.w / 2.0, x.cy - x.h / 2.0, x.cx + x.w / 2.0, x.cy + x.h / 2.0);
    let (ax0, ay0, ax1, ay1) = corners(a);
    let (bx0, by0, bx1, by1) = corners(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)
}

/// Hit flags of the class-`k` detections in descending score, with their
/// scores. Scores within a class must be distinct.
fn ranked_hits(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], k: Option<usize>, thresh: f64, min_score: f64) -> Vec<(f64, bool)> {
    let mut all: Vec<(usize, Detection)> = Vec::new();
    for (i, ds) in dets.iter().enumerate() {
        for d in ds {
            if k.is_none_or(|k| d.class_id == k) && d.score >= min_score {
                all.push((i, *d));
            }
        }
    }
    all.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut out = Vec::new();
    for (img, d) in all {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[img].iter().enumerate() {
            if g.class_id != d.class_id || taken[img][j] {
                continue;
            }
            let o = oracle_iou(&d.bbox, &g.bbox);
            if o >= thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[img][j] = true;
        }
        out.push((d.score, best.is_some()));
    }
    out
}

fn num_gt(gts: &[Vec<GtBox>], k: usize) -> usize {
    gts.iter().flatten().filter(|g| g.class_id == k).count()
}

/// `(recall, precision)` when keeping the top `n` detections, for every `n`.
fn cutoffs(hits: &[(f64, bool)], total: usize) -> Vec<(f64, f64)> {
    (1..=hits.len())
        .map(|n| {
            let tp = hits[..n].iter().filter(|h| h.1).count() as f64;
            (tp / total as f64, tp / n as f64)
        })
        .collect()
}

/// Area under the interpolated curve: each recall increment is weighted by
/// the best precision achievable at that recall or beyond.
pub fn oracle_ap(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], k: usize, thresh: f64) -> Option<f64> {
    let total = num_gt(gts, k);
    if total == 0 {
        return None;
    }
    let pts = cutoffs(&ranked_hits(dets, gts, Some(k), thresh, f64::NEG_INFINITY), total);
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (i, &(r, _)) in pts.iter().enumerate() {
        if r > prev {
            let best = pts[i..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (r - prev) * best;
            prev = r;
        }
    }
    Some(ap)
}

fn class_mean(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], classes: usize, thresh: f64) -> f64 {
    let aps: Vec<f64> = (0..classes).filter_map(|k| oracle_ap(dets, gts, k, thresh)).collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

pub struct OracleReport {
    pub precision: f64,
    pub recall: f64,
    pub ap50: Vec<Option<f64>>,
    pub map50: f64,
    pub map5095: f64,
}

pub fn oracle_evaluate(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], classes: usize, operating: f64) -> OracleReport {
    let hits = ranked_hits(dets, gts, None, 0.5, operating);
    let tp = hits.iter().filter(|h| h.1).count() as f64;
    let total: usize = gts.iter().map(Vec::len).sum();
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    OracleReport {
        precision: if hits.is_empty() { 0.0 } else { tp / hits.len() as f64 },
        recall: if total == 0 { 0.0 } else { tp / total as f64 },
        ap50: (0..classes).map(|k| oracle_ap(dets, gts, k, 0.5)).collect(),
        map50: class_mean(dets, gts, classes, 0.5),
        map5095: thresholds.iter().map(|&t| class_mean(dets, gts, classes, t)).sum::<f64>() / 10.0,
    }
}

/// PR curve CSV: an origin row per class with ground truth, then one row per
/// score cutoff with the best precision at or beyond that recall.
pub fn oracle_pr_csv(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], classes: usize) -> String {
    let mut s = String::from("class,recall,precision,score\n");
    for k in 0..classes {
        let total = num_gt(gts, k);
        if total == 0 {
            continue;
        }
        s += &format!("{k},{:.6},{:.6},{:.6}\n", 0.0, 1.0, 1.0);
        let hits = ranked_hits(dets, gts, Some(k), 0.5, f64::NEG_INFINITY);
        let pts = cutoffs(&hits, total);
        for (i, &(r, _)) in pts.iter().enumerate() {
            let best = pts[i..].iter().map(|p| p.1).fold(0.0, f64::max);
            s += &format!("{k},{r:.6},{best:.6},{:.6}\n", hits[i].0);
        }
    }
    s
}
