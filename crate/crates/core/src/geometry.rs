//! Oriented 3D boxes, residual encoding and rigid ego poses.
//!
//! Headings are counter-clockwise radians about +z with 0 along +x, always
//! wrapped into `[-pi, pi)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return invalid(format!("non-finite angle {theta}"));
    }
    Ok(wrap(theta))
}

/// Infallible wrap for values already known to be finite.
pub(crate) fn wrap(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut w = theta - two_pi * ((theta + PI) / two_pi).floor();
    // floor() rounding can land exactly on the open upper bound
    if w >= PI {
        w -= two_pi;
    }
    if w < -PI {
        w += two_pi;
    }
    w
}

/// 7-DoF oriented box: center, size (length along heading, width, height), heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box7 {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub heading: f64,
}

impl Box7 {
    pub fn new(
        cx: f64,
        cy: f64,
        cz: f64,
        length: f64,
        width: f64,
        height: f64,
        heading: f64,
    ) -> Result<Self> {
        let b = Self {
            cx,
            cy,
            cz,
            length,
            width,
            height,
            heading: wrap_angle(heading)?,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_array(v: [f64; 7]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6])
    }

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.cx,
            self.cy,
            self.cz,
            self.length,
            self.width,
            self.height,
            self.heading,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.to_array().iter().all(|v| v.is_finite()) {
            return invalid(format!("non-finite box {self:?}"));
        }
        if !(self.length > 0.0 && self.width > 0.0 && self.height > 0.0) {
            return invalid(format!("non-positive box size {self:?}"));
        }
        Ok(())
    }

    pub fn diagonal(&self) -> f64 {
        self.length.hypot(self.width)
    }

    pub fn bev_area(&self) -> f64 {
        self.length * self.width
    }

    pub fn volume(&self) -> f64 {
        self.length * self.width * self.height
    }

    pub fn z_min(&self) -> f64 {
        self.cz - 0.5 * self.height
    }

    pub fn z_max(&self) -> f64 {
        self.cz + 0.5 * self.height
    }

    /// BEV corners, counter-clockwise, starting at (+l/2, +w/2) in box frame.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.heading.sin_cos();
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.cx + c * u - s * v, self.cy + s * u + c * v])
    }

    /// Express a world-frame (same frame as the box) point in box-local coordinates.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.heading.sin_cos();
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.cz]
    }

    pub fn from_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.heading.sin_cos();
        [
            self.cx + c * p[0] - s * p[1],
            self.cy + s * p[0] + c * p[1],
            self.cz + p[2],
        ]
    }

    /// Inclusive containment test with an absolute tolerance in meters.
    pub fn contains(&self, p: [f64; 3], tol: f64) -> bool {
        let l = self.to_local(p);
        l[0].abs() <= 0.5 * self.length + tol
            && l[1].abs() <= 0.5 * self.width + tol
            && l[2].abs() <= 0.5 * self.height + tol
    }
}

/// Residual of a box against a reference box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResidualVec {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dl: f64,
    pub dw: f64,
    pub dh: f64,
    pub dtheta: f64,
}

impl ResidualVec {
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.dx,
            self.dy,
            self.dz,
            self.dl,
            self.dw,
            self.dh,
            self.dtheta,
        ]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dz: v[2],
            dl: v[3],
            dw: v[4],
            dh: v[5],
            dtheta: v[6],
        }
    }
}

/// Encode `gt` relative to `reference`: centers by the reference diagonal
/// (z by reference height), sizes as log ratios, heading as wrapped difference.
pub fn encode_residuals(gt: &Box7, reference: &Box7) -> Result<ResidualVec> {
    reference.validate()?;
    gt.validate()?;
    let d = reference.diagonal();
    Ok(ResidualVec {
        dx: (gt.cx - reference.cx) / d,
        dy: (gt.cy - reference.cy) / d,
        dz: (gt.cz - reference.cz) / reference.height,
        dl: (gt.length / reference.length).ln(),
        dw: (gt.width / reference.width).ln(),
        dh: (gt.height / reference.height).ln(),
        dtheta: wrap(gt.heading - reference.heading),
    })
}

pub fn decode_residuals(res: &ResidualVec, reference: &Box7) -> Result<Box7> {
    reference.validate()?;
    let d = reference.diagonal();
    Box7::new(
        reference.cx + res.dx * d,
        reference.cy + res.dy * d,
        reference.cz + res.dz * reference.height,
        reference.length * res.dl.exp(),
        reference.width * res.dw.exp(),
        reference.height * res.dh.exp(),
        reference.heading + res.dtheta,
    )
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn inside_convex(poly: &[[f64; 2]; 4], p: [f64; 2]) -> bool {
    (0..4).all(|i| cross(poly[i], poly[(i + 1) % 4], p) >= 0.0)
}

fn segment_intersection(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> Option<[f64; 2]> {
    let r = [p2[0] - p1[0], p2[1] - p1[1]];
    let s = [q2[0] - q1[0], q2[1] - q1[1]];
    let denom = r[0] * s[1] - r[1] * s[0];
    if denom == 0.0 {
        return None;
    }
    let qp = [q1[0] - p1[0], q1[1] - p1[1]];
    let t = (qp[0] * s[1] - qp[1] * s[0]) / denom;
    let u = (qp[0] * r[1] - qp[1] * r[0]) / denom;
    if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
        Some([p1[0] + t * r[0], p1[1] + t * r[1]])
    } else {
        None
    }
}

/// Area of the intersection of two rotated BEV rectangles.
///
/// Collects contained vertices of each rectangle and all edge crossings, then
/// orders them by angle around their centroid (the intersection is convex).
pub fn bev_intersection_area(a: &Box7, b: &Box7) -> f64 {
    let ca = a.bev_corners();
    let cb = b.bev_corners();
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(24);
    pts.extend(ca.iter().copied().filter(|&p| inside_convex(&cb, p)));
    pts.extend(cb.iter().copied().filter(|&p| inside_convex(&ca, p)));
    for i in 0..4 {
        for j in 0..4 {
            if let Some(p) = segment_intersection(ca[i], ca[(i + 1) % 4], cb[j], cb[(j + 1) % 4]) {
                pts.push(p);
            }
        }
    }
    if pts.len() < 3 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    pts.sort_by(|p, q| {
        let ap = (p[1] - cy).atan2(p[0] - cx);
        let aq = (q[1] - cy).atan2(q[0] - cx);
        ap.total_cmp(&aq)
    });
    let mut area = 0.0;
    for i in 0..pts.len() {
        let p = pts[i];
        let q = pts[(i + 1) % pts.len()];
        area += p[0] * q[1] - q[0] * p[1];
    }
    (0.5 * area).abs()
}

fn check_area(b: &Box7) -> Result<()> {
    b.validate()?;
    if b.bev_area() <= 0.0 {
        return invalid("degenerate box");
    }
    Ok(())
}

/// Rotated bird's-eye-view IoU.
pub fn iou_bev(a: &Box7, b: &Box7) -> Result<f64> {
    check_area(a)?;
    check_area(b)?;
    // evaluate in a canonical order so the result is exactly symmetric
    let (p, q) = if a.to_array() <= b.to_array() { (a, b) } else { (b, a) };
    let inter = bev_intersection_area(p, q);
    let union = p.bev_area() + q.bev_area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Volumetric IoU of two boxes sharing the z axis.
pub fn iou_3d(a: &Box7, b: &Box7) -> Result<f64> {
    check_area(a)?;
    check_area(b)?;
    let (p, q) = if a.to_array() <= b.to_array() { (a, b) } else { (b, a) };
    let dz = (p.z_max().min(q.z_max()) - p.z_min().max(q.z_min())).max(0.0);
    if dz == 0.0 {
        return Ok(0.0);
    }
    let inter = bev_intersection_area(p, q) * dz;
    let union = p.volume() + q.volume() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    Bev,
    #[default]
    #[serde(rename = "3d")]
    ThreeD,
}

impl IouKind {
    pub fn iou(self, a: &Box7, b: &Box7) -> Result<f64> {
        match self {
            IouKind::Bev => iou_bev(a, b),
            IouKind::ThreeD => iou_3d(a, b),
        }
    }
}

/// Rigid world<-ego transform, row-major 4x4 homogeneous matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub m: [f64; 16],
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        let mut m = [0.0; 16];
        m[0] = 1.0;
        m[5] = 1.0;
        m[10] = 1.0;
        m[15] = 1.0;
        Self { m }
    }

    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            m: [
                c, -s, 0.0, x, //
                s, c, 0.0, y, //
                0.0, 0.0, 1.0, z, //
                0.0, 0.0, 0.0, 1.0,
            ],
        }
    }

    pub fn from_matrix(m: [f64; 16]) -> Result<Self> {
        let p = Self { m };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.m.iter().all(|v| v.is_finite()) {
            return invalid("non-finite pose");
        }
        if self.m[12] != 0.0 || self.m[13] != 0.0 || self.m[14] != 0.0 || self.m[15] != 1.0 {
            return invalid("pose last row must be (0,0,0,1)");
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| self.m[i * 4 + k] * self.m[j * 4 + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return invalid("pose rotation is not orthonormal");
                }
            }
        }
        Ok(())
    }

    pub fn rotation(&self, i: usize, j: usize) -> f64 {
        self.m[i * 4 + j]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.m[3], self.m[7], self.m[11]]
    }

    /// `self * other`
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut m = [0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                m[i * 4 + j] = (0..4).map(|k| self.m[i * 4 + k] * other.m[k * 4 + j]).sum();
            }
        }
        Pose { m }
    }

    pub fn inverse(&self) -> Pose {
        let mut m = [0.0; 16];
        let t = self.translation();
        for i in 0..3 {
            for j in 0..3 {
                m[i * 4 + j] = self.m[j * 4 + i];
            }
            m[i * 4 + 3] = -(0..3).map(|k| self.m[k * 4 + i] * t[k]).sum::<f64>();
        }
        m[15] = 1.0;
        Pose { m }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.m[i * 4] * p[0] + self.m[i * 4 + 1] * p[1] + self.m[i * 4 + 2] * p[2] + self.m[i * 4 + 3];
        }
        out
    }

    pub fn apply_vector(&self, v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.m[i * 4] * v[0] + self.m[i * 4 + 1] * v[1] + self.m[i * 4 + 2] * v[2];
        }
        out
    }

    pub fn yaw(&self) -> f64 {
        self.m[4].atan2(self.m[0])
    }

    /// Transform taking points from `src` ego coordinates into `dst` ego coordinates.
    pub fn relative(src: &Pose, dst: &Pose) -> Pose {
        dst.inverse().compose(src)
    }
}

/// Re-express boxes given in the `src` ego frame in the `dst` ego frame.
pub fn transform_boxes(boxes: &[Box7], src: &Pose, dst: &Pose) -> Result<Vec<Box7>> {
    src.validate()?;
    dst.validate()?;
    if src == dst {
        return Ok(boxes.to_vec());
    }
    let rel = Pose::relative(src, dst);
    boxes.iter().map(|b| transform_box(b, &rel)).collect()
}

/// Apply a rigid transform to a box; heading follows the rotated forward axis.
pub fn transform_box(b: &Box7, rel: &Pose) -> Result<Box7> {
    let c = rel.apply([b.cx, b.cy, b.cz]);
    let (s, co) = b.heading.sin_cos();
    let d = rel.apply_vector([co, s, 0.0]);
    Box7::new(c[0], c[1], c[2], b.length, b.width, b.height, d[1].atan2(d[0]))
}
