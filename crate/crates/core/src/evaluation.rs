//! AP and heading-weighted APH with IoU-threshold, range and velocity
//! breakdowns.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{wrap_angle, Box7, IouKind};
use crate::scene_sim::{GtObject, VelocityThresholds};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box7,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Ascending range edges in meters; the last bin is open-ended.
    pub range_edges: Vec<f64>,
    pub velocity: VelocityThresholds,
    pub iou: IouKind,
    /// Detections scoring below this are dropped before matching.
    pub score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.7],
            range_edges: vec![0.0, 30.0, 50.0],
            velocity: VelocityThresholds::default(),
            iou: IouKind::ThreeD,
            score_threshold: 0.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() || self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return invalid("IoU thresholds must lie in (0, 1]");
        }
        if self.range_edges.is_empty() || self.range_edges.windows(2).any(|w| !(w[0] < w[1])) || !(self.range_edges[0] >= 0.0) {
            return invalid("range edges must be non-negative and strictly increasing");
        }
        Ok(())
    }

    /// Bucket names: `range_<lo>_<hi>` with `inf` for the open bin.
    pub fn range_names(&self) -> Vec<String> {
        let e = &self.range_edges;
        (0..e.len())
            .map(|i| match e.get(i + 1) {
                Some(hi) => format!("range_{}_{}", e[i], hi),
                None => format!("range_{}_inf", e[i]),
            })
            .collect()
    }

    pub fn range_bin(&self, distance: f64) -> Option<usize> {
        let e = &self.range_edges;
        (0..e.len()).rev().find(|&i| distance >= e[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledPred {
    pub score: f64,
    pub tp: bool,
    /// Heading weight `max(0, 1 - |dtheta|/pi)` of a true positive; 0 for FPs.
    pub heading_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// One label per input prediction, in input order.
    pub labels: Vec<LabeledPred>,
    pub pred_to_gt: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.labels.iter().filter(|l| l.tp).count()
    }

    pub fn fp(&self) -> usize {
        self.labels.len() - self.tp()
    }

    pub fn fn_count(&self) -> usize {
        self.gt_matched.iter().filter(|m| !**m).count()
    }
}

pub fn heading_weight(pred: f64, gt: f64) -> f64 {
    let d = wrap_angle(pred - gt).unwrap_or(std::f64::consts::PI).abs();
    (1.0 - d / std::f64::consts::PI).max(0.0)
}

/// Greedy matching in descending score order (ties by index): each
/// prediction takes its highest-IoU unmatched gt (ties by index) and is a
/// TP iff that IoU reaches `threshold`.
pub fn match_detections(preds: &[Detection], gts: &[Box7], threshold: f64, kind: IouKind) -> Result<MatchResult> {
    if preds.iter().any(|p| !p.score.is_finite()) {
        return invalid("non-finite detection score");
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut gt_matched = vec![false; gts.len()];
    let mut pred_to_gt = vec![None; preds.len()];
    let mut labels = vec![
        LabeledPred {
            score: 0.0,
            tp: false,
            heading_weight: 0.0,
        };
        preds.len()
    ];
    for &i in &order {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if gt_matched[j] {
                continue;
            }
            let v = kind.iou(&preds[i].bbox, gt)?;
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        labels[i].score = preds[i].score;
        if let Some((j, v)) = best {
            if v >= threshold && v > 0.0 {
                gt_matched[j] = true;
                pred_to_gt[i] = Some(j);
                labels[i].tp = true;
                labels[i].heading_weight = heading_weight(preds[i].bbox.heading, gts[j].heading);
            }
        }
    }
    Ok(MatchResult {
        labels,
        pred_to_gt,
        gt_matched,
    })
}

/// Precision-recall points in descending score order, with TP weights.
fn pr_points(labels: &[LabeledPred], num_gt: usize, weighted: bool) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| labels[b].score.total_cmp(&labels[a].score).then(a.cmp(&b)));
    let mut tp = 0.0;
    order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let l = &labels[i];
            if l.tp {
                tp += if weighted { l.heading_weight } else { 1.0 };
            }
            (tp / num_gt as f64, tp / (k + 1) as f64)
        })
        .collect()
}

/// All-point interpolated area under the PR curve with precision envelope.
fn area(points: &[(f64, f64)]) -> f64 {
    let mut env: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut prev_r = 0.0;
    let mut ap = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        ap += (r - prev_r) * env[i];
        prev_r = r;
    }
    ap
}

/// AP over labeled predictions; `None` when there are no ground truths.
pub fn average_precision(labels: &[LabeledPred], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    Some(area(&pr_points(labels, num_gt, false)))
}

/// AP with every true positive counted by its heading weight.
pub fn aph(labels: &[LabeledPred], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    Some(area(&pr_points(labels, num_gt, true)))
}

/// Detections and labels of one evaluated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEval {
    pub preds: Vec<Detection>,
    pub gts: Vec<GtObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub threshold: f64,
    pub bucket: String,
    pub ap: Option<f64>,
    pub aph: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub num_gt: usize,
    /// `(recall, precision)` samples at recall 0, 0.1, ..., 1 (envelope).
    pub pr_curve: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

fn bucket_key(threshold: f64) -> String {
    format!("{threshold:.2}")
}

impl MetricReport {
    pub fn get(&self, threshold: f64, bucket: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.threshold == threshold && r.bucket == bucket)
    }

    /// `ap` of a row, if present.
    pub fn ap(&self, threshold: f64, bucket: &str) -> Option<f64> {
        self.get(threshold, bucket).and_then(|r| r.ap)
    }

    /// Flat `metric/threshold/bucket=value` lines; absent values print `none`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let f = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:.6}"));
        for r in &self.rows {
            let k = format!("{}/{}", bucket_key(r.threshold), r.bucket);
            let _ = writeln!(s, "ap/{k}={}", f(r.ap));
            let _ = writeln!(s, "aph/{k}={}", f(r.aph));
            let _ = writeln!(s, "tp/{k}={}", r.tp);
            let _ = writeln!(s, "fp/{k}={}", r.fp);
            let _ = writeln!(s, "fn/{k}={}", r.fn_count);
            let _ = writeln!(s, "num_gt/{k}={}", r.num_gt);
        }
        s
    }
}

fn pr_samples(labels: &[LabeledPred], num_gt: usize) -> Vec<[f64; 2]> {
    if num_gt == 0 {
        return Vec::new();
    }
    let pts = pr_points(labels, num_gt, false);
    (0..=10)
        .map(|k| {
            let r = k as f64 / 10.0;
            let p = pts.iter().filter(|q| q.0 >= r - 1e-12).map(|q| q.1).fold(0.0, f64::max);
            [r, p]
        })
        .collect()
}

fn row(threshold: f64, bucket: String, labels: &[LabeledPred], num_gt: usize, fn_count: usize) -> MetricRow {
    let tp = labels.iter().filter(|l| l.tp).count();
    MetricRow {
        threshold,
        bucket,
        ap: average_precision(labels, num_gt),
        aph: aph(labels, num_gt),
        tp,
        fp: labels.len() - tp,
        fn_count,
        num_gt,
        pr_curve: pr_samples(labels, num_gt),
    }
}

/// Overall, per-range and per-velocity metrics at every threshold. A
/// prediction belongs to the bucket of its matched gt, or else of the
/// BEV-nearest gt of its frame; predictions in frames without any gt count
/// only towards the overall row. Buckets without gts get no row.
pub fn breakdown_report(scenes: &[SceneEval], cfg: &EvalConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let range_names = cfg.range_names();
    let nbuckets = range_names.len() + 4;
    let mut report = MetricReport::default();
    for &thr in &cfg.iou_thresholds {
        let mut all = Vec::new();
        let mut all_gt = 0;
        let mut all_fn = 0;
        let mut per: Vec<(Vec<LabeledPred>, usize, usize)> = vec![(Vec::new(), 0, 0); nbuckets];
        for sc in scenes {
            let preds: Vec<Detection> = sc.preds.iter().filter(|p| p.score >= cfg.score_threshold).copied().collect();
            let boxes: Vec<Box7> = sc.gts.iter().map(|g| g.bbox).collect();
            let m = match_detections(&preds, &boxes, thr, cfg.iou)?;
            let buckets_of = |gt: &GtObject| -> Vec<usize> {
                let mut b = Vec::with_capacity(2);
                if let Some(r) = cfg.range_bin(gt.bbox.cx.hypot(gt.bbox.cy)) {
                    b.push(r);
                }
                b.push(range_names.len() + cfg.velocity.bucket(gt.speed()).index());
                b
            };
            for (j, gt) in sc.gts.iter().enumerate() {
                for b in buckets_of(gt) {
                    per[b].1 += 1;
                    if !m.gt_matched[j] {
                        per[b].2 += 1;
                    }
                }
            }
            for (i, l) in m.labels.iter().enumerate() {
                let owner = m.pred_to_gt[i].or_else(|| {
                    let p = &preds[i].bbox;
                    (0..boxes.len()).min_by(|&a, &b| {
                        let da = (boxes[a].cx - p.cx).hypot(boxes[a].cy - p.cy);
                        let db = (boxes[b].cx - p.cx).hypot(boxes[b].cy - p.cy);
                        da.total_cmp(&db).then(a.cmp(&b))
                    })
                });
                if let Some(j) = owner {
                    for b in buckets_of(&sc.gts[j]) {
                        per[b].0.push(*l);
                    }
                }
            }
            all.extend(m.labels.iter().copied());
            all_gt += boxes.len();
            all_fn += m.fn_count();
        }
        report.rows.push(row(thr, "overall".into(), &all, all_gt, all_fn));
        let names = range_names
            .iter()
            .cloned()
            .chain(crate::scene_sim::VelocityBucket::ALL.iter().map(|v| format!("velocity_{}", v.name())));
        for (name, (labels, ngt, nfn)) in names.zip(per).filter(|(_, p)| p.1 > 0) {
            report.rows.push(row(thr, name, &labels, ngt, nfn));
        }
    }
    Ok(report)
}
