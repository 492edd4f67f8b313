//! Detection losses: binary and IoU-target objectness, smooth-L1 residual
//! regression, binned orientation, and the summed training objective.

use serde::Serialize;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{invalid, Result};
use crate::fsd::head::{self, anchor_box, encode_heading, encode_target, Prior};
use crate::fsd::{hungarian_match, FsdAssignment};
use crate::geometry::{encode_residuals, Box7, IouKind};
use crate::pillars::FeatureGrid;

/// Proposals whose matched IoU is below this are treated as background.
pub const MIN_MATCH_IOU: f64 = 0.05;

/// Mean sigmoid cross-entropy over the scored set `C` (`logits` is `|C| x 1`).
pub fn objectness_loss_binary(g: &mut Graph, logits: Var, positive: &[bool]) -> Result<Var> {
    if positive.is_empty() {
        return invalid("objectness loss over an empty set");
    }
    if g.value(logits).numel() != positive.len() {
        return invalid("one label per logit required");
    }
    Ok(g.bce_logits_mean(logits, positive.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect()))
}

/// Mean sigmoid cross-entropy against soft IoU targets in `[0, 1]`.
pub fn objectness_loss_iou_target(g: &mut Graph, logits: Var, targets: &[f64]) -> Result<Var> {
    if targets.is_empty() {
        return invalid("objectness loss over an empty set");
    }
    if targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return invalid("IoU targets must lie in [0, 1]");
    }
    if g.value(logits).numel() != targets.len() {
        return invalid("one target per logit required");
    }
    Ok(g.bce_logits_mean(logits, targets.to_vec()))
}

/// A regression term averaged over `R`; `None` when `R` is empty.
#[derive(Debug, Clone, Copy)]
pub struct RegTerm {
    pub value: Option<Var>,
}

impl RegTerm {
    pub fn get(&self, g: &Graph) -> f64 {
        self.value.map_or(0.0, |v| g.value(v).item())
    }
}

/// Huber loss summed over components and averaged over rows of `pred`.
pub fn smooth_l1(g: &mut Graph, pred: Var, target: &[f64], beta: f64) -> Result<RegTerm> {
    let t = g.value(pred);
    if t.numel() != target.len() {
        return invalid("prediction/target size mismatch");
    }
    let rows = t.rows();
    if rows == 0 {
        return Ok(RegTerm { value: None });
    }
    let s = g.smooth_l1_sum(pred, target.to_vec(), beta);
    Ok(RegTerm {
        value: Some(g.scale(s, 1.0 / rows as f64)),
    })
}

/// Bin classification plus target-bin residual regression, averaged over
/// rows. `logits` may be `None` only for `num_bins == 1`.
pub fn bin_orientation_loss(
    g: &mut Graph,
    logits: Option<Var>,
    residuals: Var,
    target_heading: &[f64],
    num_bins: usize,
    beta: f64,
) -> Result<RegTerm> {
    if num_bins == 0 {
        return invalid("num_bins must be at least 1");
    }
    let r = target_heading.len();
    if g.value(residuals).numel() != r * num_bins {
        return invalid("residual predictions must be rows x num_bins");
    }
    if r == 0 {
        return Ok(RegTerm { value: None });
    }
    let mut bins = Vec::with_capacity(r);
    let mut offsets = Vec::with_capacity(r);
    for &t in target_heading {
        let (b, o) = encode_heading(t, num_bins)?;
        bins.push(b);
        offsets.push(o);
    }
    let flat = g.reshape(residuals, r * num_bins, 1);
    let idx: Vec<usize> = bins.iter().enumerate().map(|(i, b)| i * num_bins + b).collect();
    let picked = g.gather_rows(flat, &idx);
    let mut total = g.smooth_l1_sum(picked, offsets, beta);
    if num_bins > 1 {
        let Some(l) = logits else {
            return invalid("bin logits required for more than one bin");
        };
        let ce = g.softmax_ce_sum(l, bins);
        total = g.add(total, ce);
    }
    Ok(RegTerm {
        value: Some(g.scale(total, 1.0 / r as f64)),
    })
}

/// Diagnostics of one detection loss `L_obj + L_reg`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct DetTerms {
    pub objectness: f64,
    pub regression: f64,
    pub orientation: f64,
    pub total: f64,
    pub num_scored: usize,
    pub num_positive: usize,
    /// True when `R` was empty and the regression terms are zero.
    pub empty_regression: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct DetLoss {
    pub value: Var,
    pub terms: DetTerms,
}

fn combine(g: &mut Graph, obj: Var, reg: RegTerm, orient: RegTerm, num_scored: usize, num_positive: usize) -> DetLoss {
    let mut total = obj;
    for v in [reg.value, orient.value].into_iter().flatten() {
        total = g.add(total, v);
    }
    DetLoss {
        value: total,
        terms: DetTerms {
            objectness: g.value(obj).item(),
            regression: reg.get(g),
            orientation: orient.get(g),
            total: g.value(total).item(),
            num_scored,
            num_positive,
            empty_regression: reg.value.is_none(),
        },
    }
}

/// Dense-head loss: binary objectness over the assignment's sites and
/// multi-bin regression at its positives.
pub fn fsd_loss(
    g: &mut Graph,
    head_out: Var,
    assignment: &FsdAssignment,
    gts: &[Box7],
    geom: &FeatureGrid,
    prior: &Prior,
    num_bins: usize,
    beta: f64,
) -> Result<DetLoss> {
    let rows = g.gather_rows(head_out, &assignment.sites);
    let obj = g.slice_cols(rows, head::OBJ, 1);
    let l_obj = objectness_loss_binary(g, obj, &assignment.labels)?;
    let cells: Vec<usize> = assignment.positives.iter().map(|&(p, _)| assignment.sites[p]).collect();
    let pos = g.gather_rows(head_out, &cells);
    let mut reg_t = Vec::with_capacity(6 * cells.len());
    let mut heading = Vec::with_capacity(cells.len());
    for (&cell, &(_, gi)) in cells.iter().zip(&assignment.positives) {
        let t = encode_target(&gts[gi], &anchor_box(geom, cell, prior), num_bins)?;
        reg_t.extend_from_slice(&t.residuals);
        heading.push(gts[gi].heading);
    }
    let reg_pred = g.slice_cols(pos, head::CENTER, 6);
    let reg = smooth_l1(g, reg_pred, &reg_t, beta)?;
    let bl = g.slice_cols(pos, head::BINS, num_bins);
    let br = g.slice_cols(pos, head::BINS + num_bins, num_bins);
    let orient = bin_orientation_loss(g, Some(bl), br, &heading, num_bins, beta)?;
    Ok(combine(g, l_obj, reg, orient, assignment.sites.len(), cells.len()))
}

/// Per-proposal targets of a second-stage head.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTargets {
    /// Objectness target of each valid proposal, in proposal order.
    pub iou: Vec<f64>,
    /// `(proposal, residuals)` for proposals in `R`.
    pub regression: Vec<(usize, [f64; 7])>,
}

/// Hungarian re-matching of proposals to gts; IoU targets for matched
/// proposals at or above [`MIN_MATCH_IOU`], zero elsewhere.
pub fn stage_targets(proposals: &[Box7], valid: &[bool], gts: &[Box7], kind: IouKind) -> Result<StageTargets> {
    let iou: Vec<Vec<f64>> = gts
        .iter()
        .map(|gt| {
            proposals
                .iter()
                .zip(valid)
                .map(|(p, &ok)| if ok { kind.iou(gt, p) } else { Ok(0.0) })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let m = hungarian_match(&iou, proposals.len())?;
    let mut target = vec![0.0; proposals.len()];
    let mut regression = Vec::new();
    for (pi, gi) in m.pred_to_gt.iter().enumerate() {
        if let Some(gi) = *gi {
            let v = iou[gi][pi];
            if v >= MIN_MATCH_IOU {
                target[pi] = v;
                regression.push((pi, encode_residuals(&gts[gi], &proposals[pi])?.to_array()));
            }
        }
    }
    let iou = target.into_iter().zip(valid).filter(|(_, &ok)| ok).map(|(t, _)| t).collect();
    Ok(StageTargets { iou, regression })
}

/// Second-stage loss: IoU-target objectness over valid proposals and 1-bin
/// regression over `R`. `objectness`/`residuals` may stack several heads'
/// outputs; `targets` then holds one entry per stacked copy.
pub fn stage_loss(g: &mut Graph, objectness: Var, residuals: Var, valid: &[bool], targets: &[StageTargets], beta: f64) -> Result<DetLoss> {
    let n = valid.len();
    if g.value(objectness).numel() != n * targets.len() || g.value(residuals).rows() != n * targets.len() {
        return invalid("stacked head outputs do not match targets");
    }
    let mut keep = Vec::new();
    let mut soft = Vec::new();
    let mut pos = Vec::new();
    let mut reg_t = Vec::new();
    let mut heading = Vec::new();
    for (copy, t) in targets.iter().enumerate() {
        keep.extend((0..n).filter(|&i| valid[i]).map(|i| copy * n + i));
        soft.extend_from_slice(&t.iou);
        for (pi, r) in &t.regression {
            pos.push(copy * n + pi);
            reg_t.extend_from_slice(&r[..6]);
            heading.push(r[6]);
        }
    }
    let obj = g.gather_rows(objectness, &keep);
    let l_obj = objectness_loss_iou_target(g, obj, &soft)?;
    let rows = g.gather_rows(residuals, &pos);
    let box_part = g.slice_cols(rows, 0, 6);
    let reg = smooth_l1(g, box_part, &reg_t, beta)?;
    let ang = g.slice_cols(rows, 6, 1);
    let orient = bin_orientation_loss(g, None, ang, &heading, 1, beta)?;
    Ok(combine(g, l_obj, reg, orient, keep.len(), pos.len()))
}

/// Scalar training losses of one example.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBundle {
    pub fsd: DetTerms,
    pub mvaa: DetTerms,
    pub cv: DetTerms,
    pub l_fsd: f64,
    pub l_mvaa: f64,
    pub l_cv: f64,
    pub l_total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.l_fsd, self.l_mvaa, self.l_cv, self.l_total].iter().all(|v| v.is_finite())
    }
}

/// `L_total = L_fsd + L_mvaa + L_cv` with equal weights. Missing terms are 0.
pub fn total_loss(g: &mut Graph, fsd: &DetLoss, mvaa: Option<&DetLoss>, cv: Option<&DetLoss>) -> (Var, LossBundle) {
    let zero = g.constant(Tensor::scalar(0.0));
    let m = mvaa.map_or(zero, |d| d.value);
    let c = cv.map_or(zero, |d| d.value);
    let s = g.add(fsd.value, m);
    let total = g.add(s, c);
    let bundle = LossBundle {
        fsd: fsd.terms,
        mvaa: mvaa.map(|d| d.terms).unwrap_or_default(),
        cv: cv.map(|d| d.terms).unwrap_or_default(),
        l_fsd: g.value(fsd.value).item(),
        l_mvaa: g.value(m).item(),
        l_cv: g.value(c).item(),
        l_total: g.value(total).item(),
    };
    (total, bundle)
}
