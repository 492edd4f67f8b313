//! Fast single-frame detector: pillar encoder, backbone, dense anchor-free
//! head, MaxPoolNMS proposals and Hungarian target assignment.

pub mod assign;
pub mod backbone;
pub mod head;
pub mod hungarian;
pub mod nms;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{invalid, Result};
use crate::geometry::{Box7, IouKind};
use crate::nn::Linear;
use crate::pillars::{kept_points_tensor, pillarize, scatter_to_grid, FeatureGrid, PillarAssignment, PillarEncoder, PillarGrid};

pub use assign::{fsd_assign, AssignMode, FsdAssignment};
pub use backbone::{Backbone, BackboneConfig};
pub use head::{anchor_box, decode_dense, encode_target, head_channels, HeadTarget, Prior};
pub use hungarian::{hungarian_match, Matching};
pub use nms::{greedy_nms, maxpool_nms, peak_mask, NmsEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FsdConfig {
    pub grid: PillarGrid,
    /// Per-point layer widths of the pillar encoder; the last is the map depth.
    pub pillar_widths: Vec<usize>,
    pub backbone: BackboneConfig,
    pub nms_kernel: usize,
    pub num_proposals: usize,
    /// Anchor length, width, height.
    pub prior_size: [f64; 3],
    pub prior_z: f64,
    pub num_bins: usize,
    pub iou: IouKind,
    pub assignment: AssignMode,
    /// Initial objectness bias, so that early training is not swamped by negatives.
    pub objectness_bias: f64,
}

impl Default for FsdConfig {
    fn default() -> Self {
        Self {
            grid: PillarGrid::default(),
            pillar_widths: vec![64, 64],
            backbone: BackboneConfig::default(),
            nms_kernel: 7,
            num_proposals: 128,
            prior_size: [4.7, 2.1, 1.7],
            prior_z: 0.85,
            num_bins: 12,
            iou: IouKind::ThreeD,
            assignment: AssignMode::Hungarian,
            objectness_bias: -2.0,
        }
    }
}

impl FsdConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.backbone.validate()?;
        if self.pillar_widths.is_empty() || self.pillar_widths.contains(&0) {
            return invalid("pillar_widths must be non-empty and positive");
        }
        let ts = self.backbone.total_stride();
        if self.grid.nx % ts != 0 || self.grid.ny % ts != 0 {
            return invalid(format!("grid {}x{} not divisible by backbone stride {ts}", self.grid.nx, self.grid.ny));
        }
        if self.nms_kernel % 2 == 0 {
            return invalid("nms_kernel must be odd");
        }
        if self.num_proposals == 0 || self.num_bins == 0 {
            return invalid("num_proposals and num_bins must be positive");
        }
        if self.prior_size.iter().any(|s| !(*s > 0.0)) {
            return invalid("prior_size must be positive");
        }
        Ok(())
    }

    pub fn feature_grid(&self) -> Result<FeatureGrid> {
        FeatureGrid::new(self.grid, self.backbone.stride)
    }

    pub fn prior(&self) -> Prior {
        Prior {
            size: self.prior_size,
            z: self.prior_z,
        }
    }
}

/// `N` proposals of one frame, in that frame's ego coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<Box7>,
    /// Objectness logits; `-inf` for sentinels.
    pub scores: Vec<f64>,
    /// Feature-map cell of each proposal.
    pub locations: Vec<usize>,
    /// False for sentinel padding (only when the map has fewer than `N` cells).
    pub valid: Vec<bool>,
    /// False for slots filled with non-peak locations.
    pub is_peak: Vec<bool>,
    pub frame_index: usize,
    /// `N x C` proposal features when extracted.
    pub features: Option<Tensor>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Graph handles of one FSD forward pass.
#[derive(Debug, Clone, Copy)]
pub struct FsdOutput {
    /// `cells x C` backbone feature map.
    pub features: Var,
    /// `cells x head_channels` dense predictions.
    pub head: Var,
}

#[derive(Debug, Clone)]
pub struct FsdNet {
    pub cfg: FsdConfig,
    pub geom: FeatureGrid,
    encoder: PillarEncoder,
    backbone: Backbone,
    head: Linear,
}

impl FsdNet {
    pub fn new(cfg: &FsdConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = PillarEncoder::new(store, "fsd.pfn", &cfg.pillar_widths, rng);
        let backbone = Backbone::new(store, "fsd.bb", &cfg.backbone, encoder.out_channels(), rng)?;
        let head = Linear::new_head(store, "fsd.head", cfg.backbone.out_channels(), head_channels(cfg.num_bins), rng);
        store.get_mut(head.b).data[head::OBJ] = cfg.objectness_bias;
        Ok(Self {
            cfg: cfg.clone(),
            geom: cfg.feature_grid()?,
            encoder,
            backbone,
            head,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.backbone.out_channels()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, points: &[[f64; 3]]) -> Result<FsdOutput> {
        let a = pillarize(points, &self.cfg.grid);
        let p = g.constant(kept_points_tensor(points, &a));
        self.forward_pillars(g, store, p, &a)
    }

    /// Forward from the kept-point tensor of a precomputed assignment.
    pub fn forward_pillars(&self, g: &mut Graph, store: &ParamStore, points: Var, assignment: &PillarAssignment) -> Result<FsdOutput> {
        let grid = &self.cfg.grid;
        let pf = self.encoder.forward(g, store, points, assignment, grid);
        let dense = scatter_to_grid(g, pf, assignment, grid);
        let features = self.backbone.forward(g, store, dense, grid.nx, grid.ny)?;
        let head = self.head.forward(g, store, features);
        Ok(FsdOutput { features, head })
    }

    /// Decode MaxPoolNMS survivors of a forward pass into a proposal set.
    pub fn propose(&self, g: &Graph, out: &FsdOutput, frame_index: usize) -> Result<ProposalSet> {
        propose_from_head(g.value(out.head), &self.geom, &self.cfg, frame_index)
    }
}

pub fn propose_from_head(head: &Tensor, geom: &FeatureGrid, cfg: &FsdConfig, frame_index: usize) -> Result<ProposalSet> {
    let nb = cfg.num_bins;
    let c = head_channels(nb);
    if head.shape != [geom.num_cells(), c] {
        return invalid(format!("head output {:?} does not match {} cells", head.shape, geom.num_cells()));
    }
    if !head.is_finite() {
        return Err(crate::Error::Numerical("non-finite head output".into()));
    }
    let scores: Vec<f64> = (0..geom.num_cells()).map(|i| head.at(i, head::OBJ)).collect();
    let n = cfg.num_proposals;
    let kernel = cfg.nms_kernel.min(odd_floor(geom.height().min(geom.width())));
    let picks = maxpool_nms(&scores, geom.height(), geom.width(), kernel, n)?;
    let prior = cfg.prior();
    let mut set = ProposalSet {
        boxes: Vec::with_capacity(n),
        scores: Vec::with_capacity(n),
        locations: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
        is_peak: Vec::with_capacity(n),
        frame_index,
        features: None,
    };
    for e in &picks {
        set.boxes.push(head::decode_row(head.row(e.index), &anchor_box(geom, e.index, &prior), nb)?);
        set.scores.push(e.score);
        set.locations.push(e.index);
        set.valid.push(true);
        set.is_peak.push(e.is_peak);
    }
    while set.len() < n {
        set.boxes.push(anchor_box(geom, 0, &prior));
        set.scores.push(f64::NEG_INFINITY);
        set.locations.push(0);
        set.valid.push(false);
        set.is_peak.push(false);
    }
    Ok(set)
}

fn odd_floor(v: usize) -> usize {
    if v % 2 == 0 {
        v.saturating_sub(1).max(1)
    } else {
        v
    }
}
