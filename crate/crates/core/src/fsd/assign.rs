//! Ground-truth assignment for the dense head.

use serde::{Deserialize, Serialize};

use super::hungarian::{hungarian_match, Matching};
use super::ProposalSet;
use crate::error::Result;
use crate::geometry::{Box7, IouKind};
use crate::pillars::FeatureGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignMode {
    /// Hungarian matching of gts to proposals on IoU; zero-overlap gts fall
    /// back to their nearest cell.
    #[default]
    Hungarian,
    /// Every gt is assigned to the cell nearest its center (ablation).
    Center,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsdAssignment {
    /// Cells scored by the objectness loss: every valid proposal location,
    /// followed by positive sites that were not among them.
    pub sites: Vec<usize>,
    pub labels: Vec<bool>,
    /// `(position in sites, gt index)` of every positive, in gt order.
    pub positives: Vec<(usize, usize)>,
    /// Positive cell of each gt.
    pub gt_cell: Vec<usize>,
    /// True when the gt was not placed on its matched proposal.
    pub reassigned: Vec<bool>,
    pub matching: Option<Matching>,
}

impl FsdAssignment {
    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }
}

/// IoU of every gt against every proposal; invalid proposals score 0.
pub fn iou_matrix(gts: &[Box7], proposals: &ProposalSet, kind: IouKind) -> Result<Vec<Vec<f64>>> {
    gts.iter()
        .map(|g| {
            proposals
                .boxes
                .iter()
                .zip(&proposals.valid)
                .map(|(p, &ok)| if ok { kind.iou(g, p) } else { Ok(0.0) })
                .collect()
        })
        .collect()
}

fn nearest_free(geom: &FeatureGrid, b: &Box7, taken: &[usize]) -> usize {
    let mut k = taken.len() + 1;
    loop {
        let cells = geom.nearest_cells(b.cx, b.cy, k.min(geom.num_cells()));
        if let Some(&c) = cells.iter().find(|c| !taken.contains(c)) {
            return c;
        }
        if k >= geom.num_cells() {
            // more gts than cells; fall back to sharing the nearest cell
            return cells[0];
        }
        k *= 2;
    }
}

pub fn fsd_assign(proposals: &ProposalSet, gts: &[Box7], geom: &FeatureGrid, kind: IouKind, mode: AssignMode) -> Result<FsdAssignment> {
    let mut gt_cell = vec![usize::MAX; gts.len()];
    let mut reassigned = vec![false; gts.len()];
    let mut matching = None;
    let mut taken: Vec<usize> = Vec::new();
    match mode {
        AssignMode::Hungarian => {
            let iou = iou_matrix(gts, proposals, kind)?;
            let m = hungarian_match(&iou, proposals.len())?;
            for (gi, p) in m.gt_to_pred.iter().enumerate() {
                if let Some(p) = *p {
                    if iou[gi][p] > 0.0 {
                        gt_cell[gi] = proposals.locations[p];
                        taken.push(gt_cell[gi]);
                    }
                }
            }
            matching = Some(m);
        }
        AssignMode::Center => {}
    }
    for gi in 0..gts.len() {
        if gt_cell[gi] == usize::MAX {
            gt_cell[gi] = nearest_free(geom, &gts[gi], &taken);
            taken.push(gt_cell[gi]);
            reassigned[gi] = mode == AssignMode::Hungarian;
        }
    }
    let mut sites: Vec<usize> = proposals
        .locations
        .iter()
        .zip(&proposals.valid)
        .filter(|(_, &ok)| ok)
        .map(|(&l, _)| l)
        .collect();
    let mut positives = Vec::with_capacity(gts.len());
    for (gi, &c) in gt_cell.iter().enumerate() {
        let pos = match sites.iter().position(|&s| s == c) {
            Some(p) => p,
            None => {
                sites.push(c);
                sites.len() - 1
            }
        };
        positives.push((pos, gi));
    }
    let mut labels = vec![false; sites.len()];
    for &(p, _) in &positives {
        labels[p] = true;
    }
    Ok(FsdAssignment {
        sites,
        labels,
        positives,
        gt_cell,
        reassigned,
        matching,
    })
}
