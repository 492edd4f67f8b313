//! Dynamic pillar voxelization and the per-pillar point encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{invalid, Result};

/// Regular BEV grid of infinite-height columns. Flat pillar index is
/// `ix * ny + iy`, which is also the row index of dense `(nx*ny) x C` maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PillarGrid {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub nx: usize,
    pub ny: usize,
}

impl Default for PillarGrid {
    fn default() -> Self {
        Self {
            x_range: [-19.2, 19.2],
            y_range: [-19.2, 19.2],
            z_range: [-2.0, 4.0],
            nx: 128,
            ny: 128,
        }
    }
}

impl PillarGrid {
    /// Full-size grid: 512 x 512 pillars over +-76.8 m.
    pub fn full_scale() -> Self {
        Self {
            x_range: [-76.8, 76.8],
            y_range: [-76.8, 76.8],
            z_range: [-2.0, 4.0],
            nx: 512,
            ny: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for r in [self.x_range, self.y_range, self.z_range] {
            if !(r[0] < r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return invalid(format!("bad grid range {r:?}"));
            }
        }
        if self.nx == 0 || self.ny == 0 {
            return invalid("grid must have at least one pillar per axis");
        }
        Ok(())
    }

    pub fn pillar_size(&self) -> [f64; 2] {
        [
            (self.x_range[1] - self.x_range[0]) / self.nx as f64,
            (self.y_range[1] - self.y_range[0]) / self.ny as f64,
        ]
    }

    pub fn num_pillars(&self) -> usize {
        self.nx * self.ny
    }

    pub fn z_center(&self) -> f64 {
        0.5 * (self.z_range[0] + self.z_range[1])
    }

    /// Pillar `(ix, iy)` containing the point, or `None` when out of range.
    /// Ranges are half-open in x and y and closed in z.
    pub fn locate(&self, p: [f64; 3]) -> Option<(usize, usize)> {
        if !(p[0] >= self.x_range[0] && p[0] < self.x_range[1]) {
            return None;
        }
        if !(p[1] >= self.y_range[0] && p[1] < self.y_range[1]) {
            return None;
        }
        if !(p[2] >= self.z_range[0] && p[2] <= self.z_range[1]) {
            return None;
        }
        let [sx, sy] = self.pillar_size();
        let ix = (((p[0] - self.x_range[0]) / sx) as usize).min(self.nx - 1);
        let iy = (((p[1] - self.y_range[0]) / sy) as usize).min(self.ny - 1);
        Some((ix, iy))
    }

    pub fn flat(&self, ix: usize, iy: usize) -> usize {
        ix * self.ny + iy
    }

    pub fn unflat(&self, idx: usize) -> (usize, usize) {
        (idx / self.ny, idx % self.ny)
    }

    pub fn pillar_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        let [sx, sy] = self.pillar_size();
        [
            self.x_range[0] + (ix as f64 + 0.5) * sx,
            self.y_range[0] + (iy as f64 + 0.5) * sy,
        ]
    }

    /// Nearest pillar center to a BEV position, clamped onto the grid.
    pub fn nearest_pillar(&self, x: f64, y: f64) -> (usize, usize) {
        let [sx, sy] = self.pillar_size();
        let fx = ((x - self.x_range[0]) / sx - 0.5).round();
        let fy = ((y - self.y_range[0]) / sy - 0.5).round();
        (
            fx.clamp(0.0, (self.nx - 1) as f64) as usize,
            fy.clamp(0.0, (self.ny - 1) as f64) as usize,
        )
    }
}

/// Sparse point-to-pillar assignment. Every in-range point is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarAssignment {
    /// Indices into the original point list of the kept points.
    pub kept: Vec<usize>,
    /// For each kept point, its position in `occupied`.
    pub segment: Vec<usize>,
    /// Flat indices of occupied pillars, ascending.
    pub occupied: Vec<usize>,
    pub discarded: usize,
}

impl PillarAssignment {
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.occupied.len()];
        for &s in &self.segment {
            c[s] += 1;
        }
        c
    }
}

pub fn pillarize(points: &[[f64; 3]], grid: &PillarGrid) -> PillarAssignment {
    let mut kept = Vec::with_capacity(points.len());
    let mut flat = Vec::with_capacity(points.len());
    let mut discarded = 0;
    for (i, p) in points.iter().enumerate() {
        match grid.locate(*p) {
            Some((ix, iy)) => {
                kept.push(i);
                flat.push(grid.flat(ix, iy));
            }
            None => discarded += 1,
        }
    }
    let mut occupied = flat.clone();
    occupied.sort_unstable();
    occupied.dedup();
    let segment = flat
        .iter()
        .map(|f| occupied.binary_search(f).expect("occupied contains every flat index"))
        .collect();
    PillarAssignment {
        kept,
        segment,
        occupied,
        discarded,
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

/// Shared per-point MLP followed by a per-pillar max-pool.
///
/// Point inputs are translation-free: `z`, the xy offset to the pillar center
/// (in pillar units) and the xyz offset to the pillar's point mean.
#[derive(Debug, Clone)]
pub struct PillarEncoder {
    layers: Vec<Dense>,
    out_channels: usize,
}

pub const POINT_FEATURES: usize = 6;

impl PillarEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        let mut fan_in = POINT_FEATURES;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Dense {
                w: store.add_weight(format!("{prefix}.l{i}.w"), fan_in, w, rng),
                b: store.add_bias(format!("{prefix}.l{i}.b"), w, 0.0),
            });
            fan_in = w;
        }
        Self {
            layers,
            out_channels: fan_in,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Per-occupied-pillar features (`occupied.len() x C`). `points` is the
    /// `kept.len() x 3` tensor of kept points, in `assignment.kept` order.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, points: Var, assignment: &PillarAssignment, grid: &PillarGrid) -> Var {
        let n = assignment.kept.len();
        let [sx, sy] = grid.pillar_size();
        let mut centers = Vec::with_capacity(n * 3);
        for &s in &assignment.segment {
            let (ix, iy) = grid.unflat(assignment.occupied[s]);
            let c = grid.pillar_center(ix, iy);
            centers.extend_from_slice(&[c[0], c[1], 0.0]);
        }
        let centers = g.constant(Tensor::matrix(n, 3, centers));
        let nseg = assignment.occupied.len();
        let mean = g.segment_mean(points, &assignment.segment, nseg);
        let mean_pp = g.gather_rows(mean, &assignment.segment);
        let to_center = g.sub(points, centers);
        let to_mean = g.sub(points, mean_pp);
        // selectors: [z, dxc/sx, dyc/sy, dxm/sx, dym/sy, dzm]
        let mut s0 = vec![0.0; 3 * POINT_FEATURES];
        s0[2 * POINT_FEATURES] = 1.0;
        let mut s1 = vec![0.0; 3 * POINT_FEATURES];
        s1[1] = 1.0 / sx;
        s1[POINT_FEATURES + 2] = 1.0 / sy;
        let mut s2 = vec![0.0; 3 * POINT_FEATURES];
        s2[3] = 1.0 / sx;
        s2[POINT_FEATURES + 4] = 1.0 / sy;
        s2[2 * POINT_FEATURES + 5] = 1.0;
        let s0 = g.constant(Tensor::matrix(3, POINT_FEATURES, s0));
        let s1 = g.constant(Tensor::matrix(3, POINT_FEATURES, s1));
        let s2 = g.constant(Tensor::matrix(3, POINT_FEATURES, s2));
        let f0 = g.matmul(points, s0);
        let f1 = g.matmul(to_center, s1);
        let f2 = g.matmul(to_mean, s2);
        let f01 = g.add(f0, f1);
        let mut h = g.add(f01, f2);
        for layer in &self.layers {
            let w = g.param(store, layer.w);
            let b = g.param(store, layer.b);
            let z = g.matmul(h, w);
            let z = g.add_row_bias(z, b);
            h = g.relu(z);
        }
        g.segment_max(h, &assignment.segment, nseg)
    }
}

/// Kept points of `assignment` as an `n x 3` tensor.
pub fn kept_points_tensor(points: &[[f64; 3]], assignment: &PillarAssignment) -> Tensor {
    let data = assignment
        .kept
        .iter()
        .flat_map(|&i| points[i])
        .collect();
    Tensor::matrix(assignment.kept.len(), 3, data)
}

/// Dense `(nx*ny) x C` map with pillar features at occupied rows, zeros elsewhere.
pub fn scatter_to_grid(g: &mut Graph, pillar_feats: Var, assignment: &PillarAssignment, grid: &PillarGrid) -> Var {
    g.scatter_rows(pillar_feats, &assignment.occupied, grid.num_pillars())
}

/// Cell layout of a backbone output map: the pillar grid downsampled by
/// `stride`. Cell index is `i * width + j` with `i` along x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub grid: PillarGrid,
    pub stride: usize,
}

impl FeatureGrid {
    pub fn new(grid: PillarGrid, stride: usize) -> Result<Self> {
        grid.validate()?;
        if stride == 0 || grid.nx % stride != 0 || grid.ny % stride != 0 {
            return invalid(format!("stride {stride} does not divide {}x{}", grid.nx, grid.ny));
        }
        Ok(Self { grid, stride })
    }

    pub fn height(&self) -> usize {
        self.grid.nx / self.stride
    }

    pub fn width(&self) -> usize {
        self.grid.ny / self.stride
    }

    pub fn num_cells(&self) -> usize {
        self.height() * self.width()
    }

    pub fn cell_size(&self) -> [f64; 2] {
        let [sx, sy] = self.grid.pillar_size();
        [sx * self.stride as f64, sy * self.stride as f64]
    }

    pub fn cell_center(&self, idx: usize) -> [f64; 2] {
        let (i, j) = (idx / self.width(), idx % self.width());
        let [cx, cy] = self.cell_size();
        [
            self.grid.x_range[0] + (i as f64 + 0.5) * cx,
            self.grid.y_range[0] + (j as f64 + 0.5) * cy,
        ]
    }

    /// Continuous map coordinates of a BEV position; cell `(i, j)` has its
    /// center at `(i, j)`.
    pub fn to_map_coords(&self, x: f64, y: f64) -> [f64; 2] {
        let [cx, cy] = self.cell_size();
        [
            (x - self.grid.x_range[0]) / cx - 0.5,
            (y - self.grid.y_range[0]) / cy - 0.5,
        ]
    }

    /// Cells ordered by BEV distance of their centers to `(x, y)`, ties by
    /// index. Only the `limit` nearest are returned.
    pub fn nearest_cells(&self, x: f64, y: f64, limit: usize) -> Vec<usize> {
        let [u, v] = self.to_map_coords(x, y);
        let (h, w) = (self.height() as isize, self.width() as isize);
        let [cx, cy] = self.cell_size();
        let ci = u.round().clamp(0.0, (h - 1) as f64) as isize;
        let cj = v.round().clamp(0.0, (w - 1) as f64) as isize;
        let mut r = 1isize;
        loop {
            let mut cand: Vec<(f64, usize)> = Vec::new();
            for i in (ci - r).max(0)..=(ci + r).min(h - 1) {
                for j in (cj - r).max(0)..=(cj + r).min(w - 1) {
                    let idx = (i * w + j) as usize;
                    let c = self.cell_center(idx);
                    cand.push(((c[0] - x).hypot(c[1] - y), idx));
                }
            }
            let whole = ci - r <= 0 && cj - r <= 0 && ci + r >= h - 1 && cj + r >= w - 1;
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            // Every cell within distance r*min(cell) of (x, y) lies in the window.
            let safe = (r as f64 - 0.5) * cx.min(cy);
            let sure = cand.iter().take_while(|c| c.0 <= safe).count();
            if whole || sure >= limit {
                cand.truncate(limit);
                return cand.into_iter().map(|c| c.1).collect();
            }
            r *= 2;
        }
    }
}

/// Dense BEV feature map detached from any graph, as stored in the memory bank.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    pub geom: FeatureGrid,
    /// `(height * width) x C`
    pub data: Tensor,
}

impl BevFeatureMap {
    pub fn new(geom: FeatureGrid, data: Tensor) -> Result<Self> {
        if data.shape.len() != 2 || data.rows() != geom.num_cells() {
            return Err(crate::Error::Shape(format!(
                "feature map {:?} does not fit {}x{} cells",
                data.shape,
                geom.height(),
                geom.width()
            )));
        }
        Ok(Self { geom, data })
    }

    pub fn height(&self) -> usize {
        self.geom.height()
    }

    pub fn width(&self) -> usize {
        self.geom.width()
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn to_map_coords(&self, x: f64, y: f64) -> [f64; 2] {
        self.geom.to_map_coords(x, y)
    }
}
