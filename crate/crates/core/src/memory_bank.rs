//! FIFO of past frames' proposals and feature maps, and rotated ROI feature
//! extraction from those maps.

use std::collections::VecDeque;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{invalid, Result};
use crate::fsd::ProposalSet;
use crate::geometry::{transform_boxes, Box7, Pose};
use crate::pillars::{BevFeatureMap, FeatureGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub proposals: ProposalSet,
    pub fmap: BevFeatureMap,
    pub pose: Pose,
    pub frame_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<MemoryEntry>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return invalid("memory bank capacity must be positive");
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&MemoryEntry> {
        self.entries.get(i)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Append an entry, returning the evicted oldest entry when full.
    pub fn push(&mut self, entry: MemoryEntry) -> Result<Option<MemoryEntry>> {
        if entry.fmap.data.rows() != entry.fmap.geom.num_cells() {
            return invalid("feature map rows do not match its grid");
        }
        if let Some(f) = entry.proposals.features.as_ref() {
            if f.rows() != entry.proposals.len() {
                return invalid("proposal features do not match proposal count");
            }
        }
        if let Some(last) = self.entries.back() {
            if entry.frame_index <= last.frame_index {
                return invalid(format!(
                    "frame index {} not after {}",
                    entry.frame_index, last.frame_index
                ));
            }
            if entry.proposals.len() != last.proposals.len() {
                return invalid("proposal count differs from stored entries");
            }
            if entry.fmap.geom != last.fmap.geom || entry.fmap.channels() != last.fmap.channels() {
                return invalid("feature map shape differs from stored entries");
            }
        }
        self.entries.push_back(entry);
        Ok(if self.entries.len() > self.capacity {
            self.entries.pop_front()
        } else {
            None
        })
    }
}

/// Union of all stored and target proposals, `M = (n_stored + 1) * N` keys.
/// Sources are ordered as the bank entries followed by the target.
#[derive(Debug, Clone, PartialEq)]
pub struct UnionKeys {
    /// Keys in the target frame.
    pub target_frame: Vec<Box7>,
    /// Keys re-expressed in each stored entry's frame, in bank order.
    pub per_stored: Vec<Vec<Box7>>,
    pub valid: Vec<bool>,
}

pub fn union_proposals(bank: &MemoryBank, target: &ProposalSet, target_pose: &Pose) -> Result<UnionKeys> {
    let mut sources: Vec<(&ProposalSet, &Pose)> = bank.entries().map(|e| (&e.proposals, &e.pose)).collect();
    sources.push((target, target_pose));
    let mut target_frame = Vec::new();
    let mut valid = Vec::new();
    for (p, pose) in &sources {
        target_frame.extend(transform_boxes(&p.boxes, pose, target_pose)?);
        valid.extend_from_slice(&p.valid);
    }
    let per_stored = bank
        .entries()
        .map(|e| transform_boxes(&target_frame, target_pose, &e.pose))
        .collect::<Result<Vec<_>>>()?;
    Ok(UnionKeys {
        target_frame,
        per_stored,
        valid,
    })
}

/// Key point offsets in the box frame: centers of a `k x k` partition of the
/// footprint, as fractions of length and width.
pub fn key_point_fractions(k: usize) -> Vec<[f64; 2]> {
    let f = |i: usize| (i as f64 + 0.5) / k as f64 - 0.5;
    (0..k).flat_map(|i| (0..k).map(move |j| [f(i), f(j)])).collect()
}

/// Bilinear sampling weights of map coordinate `(u, v)`, zero outside.
fn bilinear(geom: &FeatureGrid, u: f64, v: f64, scale: f64, out: &mut Vec<(usize, f64)>) {
    let (h, w) = (geom.height() as isize, geom.width() as isize);
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let (u0, v0) = (u0 as isize, v0 as isize);
    for (di, wu) in [(0, 1.0 - fu), (1, fu)] {
        for (dj, wv) in [(0, 1.0 - fv), (1, fv)] {
            let (i, j) = (u0 + di, v0 + dj);
            let wgt = wu * wv * scale;
            if i >= 0 && i < h && j >= 0 && j < w && wgt != 0.0 {
                out.push(((i * w + j) as usize, wgt));
            }
        }
    }
}

/// Per-box mixing weights over map cells whose application yields the mean
/// of `k x k` bilinear samples.
pub fn roi_weights(geom: &FeatureGrid, boxes: &[Box7], k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    if k == 0 {
        return invalid("ROI grid size must be at least 1");
    }
    let fr = key_point_fractions(k);
    let scale = 1.0 / fr.len() as f64;
    Ok(boxes
        .iter()
        .map(|b| {
            let mut e = Vec::with_capacity(4 * fr.len());
            for f in &fr {
                let p = b.from_local([f[0] * b.length, f[1] * b.width, 0.0]);
                let [u, v] = geom.to_map_coords(p[0], p[1]);
                bilinear(geom, u, v, scale, &mut e);
            }
            e
        })
        .collect())
}

/// ROI features of `boxes` (`len x C`) from a detached feature map.
pub fn extract_roi_features(fmap: &BevFeatureMap, boxes: &[Box7], k: usize) -> Result<Tensor> {
    let weights = roi_weights(&fmap.geom, boxes, k)?;
    let c = fmap.channels();
    let mut out = vec![0.0; boxes.len() * c];
    for (r, e) in weights.iter().enumerate() {
        let row = &mut out[r * c..(r + 1) * c];
        for &(i, w) in e {
            for (o, v) in row.iter_mut().zip(fmap.data.row(i)) {
                *o += w * v;
            }
        }
    }
    Ok(Tensor::matrix(boxes.len(), c, out))
}

/// Differentiable ROI features from a map held in a graph.
pub fn roi_features(g: &mut Graph, fmap: Var, geom: &FeatureGrid, boxes: &[Box7], k: usize) -> Result<Var> {
    let weights = roi_weights(geom, boxes, k)?;
    Ok(g.weighted_gather(fmap, weights))
}
