//! Per-location box parameterization of the dense head: anchor boxes,
//! orientation bins, target encoding and decoding.

use std::f64::consts::PI;

use crate::error::Result;
use crate::geometry::{decode_residuals, encode_residuals, wrap_angle, Box7, ResidualVec};
use crate::pillars::FeatureGrid;

pub const OBJ: usize = 0;
pub const CENTER: usize = 1;
pub const Z: usize = 3;
pub const SIZE: usize = 4;
pub const BINS: usize = 7;

/// Largest magnitude of a decoded log-size ratio.
pub const MAX_LOG_SIZE: f64 = 4.0;

/// Channel count of the dense head for `num_bins` orientation bins.
pub fn head_channels(num_bins: usize) -> usize {
    BINS + 2 * num_bins
}

pub fn bin_width(num_bins: usize) -> f64 {
    2.0 * PI / num_bins as f64
}

/// Center of bin `i`; bins partition `[-pi, pi)`.
pub fn bin_center(i: usize, num_bins: usize) -> f64 {
    -PI + (i as f64 + 0.5) * bin_width(num_bins)
}

/// Bin containing the wrapped heading.
pub fn bin_index(theta: f64, num_bins: usize) -> Result<usize> {
    let t = wrap_angle(theta)?;
    let i = ((t + PI) / bin_width(num_bins)).floor() as usize;
    Ok(i.min(num_bins - 1))
}

/// Orientation target: bin index plus the wrapped offset from its center.
pub fn encode_heading(theta: f64, num_bins: usize) -> Result<(usize, f64)> {
    let i = bin_index(theta, num_bins)?;
    Ok((i, wrap_angle(theta - bin_center(i, num_bins))?))
}

/// Heading from bin logits and per-bin residuals: argmax bin (first on ties)
/// plus that bin's residual, wrapped.
pub fn decode_heading(logits: &[f64], residuals: &[f64]) -> f64 {
    let nb = logits.len();
    let mut best = 0;
    for i in 1..nb {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    let t = bin_center(best, nb) + residuals[best];
    wrap_angle(t).unwrap_or(0.0)
}

/// Class prior used as the anchor of every location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prior {
    /// length, width, height
    pub size: [f64; 3],
    pub z: f64,
}

impl Prior {
    pub fn diagonal(&self) -> f64 {
        self.size[0].hypot(self.size[1])
    }
}

/// Anchor of cell `idx`: the prior box at the cell center, heading 0.
pub fn anchor_box(geom: &FeatureGrid, idx: usize, prior: &Prior) -> Box7 {
    let [x, y] = geom.cell_center(idx);
    Box7 {
        cx: x,
        cy: y,
        cz: prior.z,
        length: prior.size[0],
        width: prior.size[1],
        height: prior.size[2],
        heading: 0.0,
    }
}

/// Regression target of one positive location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadTarget {
    /// dx, dy, dz, dl, dw, dh against the anchor
    pub residuals: [f64; 6],
    pub bin: usize,
    pub bin_residual: f64,
}

pub fn encode_target(gt: &Box7, anchor: &Box7, num_bins: usize) -> Result<HeadTarget> {
    let r = encode_residuals(gt, anchor)?;
    let (bin, bin_residual) = encode_heading(gt.heading, num_bins)?;
    Ok(HeadTarget {
        residuals: [r.dx, r.dy, r.dz, r.dl, r.dw, r.dh],
        bin,
        bin_residual,
    })
}

/// Decode one head row (layout `[obj, dx, dy, dz, dl, dw, dh, bins.., bin residuals..]`).
pub fn decode_row(row: &[f64], anchor: &Box7, num_bins: usize) -> Result<Box7> {
    let ls = |v: f64| v.clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE);
    let res = ResidualVec {
        dx: row[CENTER],
        dy: row[CENTER + 1],
        dz: row[Z],
        dl: ls(row[SIZE]),
        dw: ls(row[SIZE + 1]),
        dh: ls(row[SIZE + 2]),
        dtheta: 0.0,
    };
    let mut b = decode_residuals(&res, anchor)?;
    b.heading = decode_heading(&row[BINS..BINS + num_bins], &row[BINS + num_bins..BINS + 2 * num_bins]);
    Ok(b)
}

/// Decoded box at every cell of a dense head output (`cells x channels`).
pub fn decode_dense(head: &[f64], geom: &FeatureGrid, prior: &Prior, num_bins: usize) -> Result<Vec<Box7>> {
    let c = head_channels(num_bins);
    head.chunks(c)
        .enumerate()
        .map(|(idx, row)| decode_row(row, &anchor_box(geom, idx, prior), num_bins))
        .collect()
}
