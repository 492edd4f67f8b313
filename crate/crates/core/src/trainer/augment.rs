//! Random flip and rotation applied consistently to points, labels and poses.

use crate::error::Result;
use crate::geometry::{Box7, Pose};
use crate::scene_sim::FrameRecord;

/// Rigid or mirror map of the plane applied to every frame: optional
/// reflection `y -> -y` followed by a rotation about z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub flip_y: bool,
    pub rotation: f64,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self {
            flip_y: false,
            rotation: 0.0,
        }
    }

    fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation.sin_cos();
        let f = if self.flip_y { -1.0 } else { 1.0 };
        [[c, -s * f], [s, c * f]]
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let a = self.linear();
        [a[0][0] * p[0] + a[0][1] * p[1], a[1][0] * p[0] + a[1][1] * p[1], p[2]]
    }

    pub fn apply_vector(&self, v: [f64; 2]) -> [f64; 2] {
        let p = self.apply_point([v[0], v[1], 0.0]);
        [p[0], p[1]]
    }

    pub fn apply_box(&self, b: &Box7) -> Result<Box7> {
        let c = self.apply_point([b.cx, b.cy, b.cz]);
        let h = if self.flip_y { -b.heading } else { b.heading };
        Box7::new(c[0], c[1], c[2], b.length, b.width, b.height, h + self.rotation)
    }

    /// Conjugate `pose` so that the world is transformed together with every
    /// ego frame; relative poses stay rigid.
    pub fn apply_pose(&self, pose: &Pose) -> Result<Pose> {
        let a = self.linear();
        let mut m3 = [[0.0; 3]; 3];
        for (i, row) in m3.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = pose.rotation(i, j);
            }
        }
        let l = |i: usize, j: usize| -> f64 {
            if i < 2 && j < 2 {
                a[i][j]
            } else if i == j {
                1.0
            } else {
                0.0
            }
        };
        // A R A^T (A is orthogonal)
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    for q in 0..3 {
                        s += l(i, k) * m3[k][q] * l(j, q);
                    }
                }
                r[i][j] = s;
            }
        }
        let t = self.apply_point(pose.translation());
        let mut m = [0.0; 16];
        for i in 0..3 {
            for j in 0..3 {
                m[i * 4 + j] = r[i][j];
            }
            m[i * 4 + 3] = t[i];
        }
        m[15] = 1.0;
        Pose::from_matrix(m)
    }

    pub fn apply_frames(&self, frames: &mut [FrameRecord]) -> Result<()> {
        for f in frames {
            for p in &mut f.points {
                *p = self.apply_point(*p);
            }
            for g in &mut f.gt {
                g.bbox = self.apply_box(&g.bbox)?;
                g.velocity = self.apply_vector(g.velocity);
            }
            f.ego_pose = self.apply_pose(&f.ego_pose)?;
        }
        Ok(())
    }
}
