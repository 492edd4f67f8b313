//! Synthetic multi-frame LiDAR sequences.
//!
//! Vehicles move at constant velocity with heading aligned to velocity. Each
//! frame samples points only on box faces that face the sensor (plus the top
//! face when the sensor is above it), so a single frame sees a partial view.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{transform_box, Box7, Pose};

pub const FRAME_DT: f64 = 0.1;
const SEQ_MAGIC: &[u8; 4] = b"M3DS";
const SEQ_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: Box7,
    /// Ego-frame velocity in m/s.
    pub velocity: [f64; 2],
    pub track_id: u32,
}

impl GtObject {
    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub timestamp: f64,
    pub ego_pose: Pose,
    /// Ego-frame points.
    pub points: Vec<[f64; 3]>,
    pub gt: Vec<GtObject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VelocityBucket {
    Stationary,
    Slow,
    Medium,
    Fast,
}

impl VelocityBucket {
    pub const ALL: [VelocityBucket; 4] = [
        VelocityBucket::Stationary,
        VelocityBucket::Slow,
        VelocityBucket::Medium,
        VelocityBucket::Fast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VelocityBucket::Stationary => "stationary",
            VelocityBucket::Slow => "slow",
            VelocityBucket::Medium => "medium",
            VelocityBucket::Fast => "fast",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Speed thresholds (m/s) separating the four velocity buckets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocityThresholds {
    pub slow: f64,
    pub medium: f64,
    pub fast: f64,
}

impl Default for VelocityThresholds {
    fn default() -> Self {
        Self {
            slow: 0.2,
            medium: 1.0,
            fast: 5.0,
        }
    }
}

impl VelocityThresholds {
    pub fn bucket(&self, speed: f64) -> VelocityBucket {
        if speed < self.slow {
            VelocityBucket::Stationary
        } else if speed < self.medium {
            VelocityBucket::Slow
        } else if speed < self.fast {
            VelocityBucket::Medium
        } else {
            VelocityBucket::Fast
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_objects: usize,
    pub num_frames: usize,
    /// Relative sampling weight of each velocity bucket (stationary, slow, medium, fast).
    pub bucket_weights: [f64; 4],
    /// Speed interval `[min, max]` in m/s per bucket.
    pub speed_ranges: [[f64; 2]; 4],
    /// Mean and standard deviation of box length, width, height (m).
    pub length: [f64; 2],
    pub width: [f64; 2],
    pub height: [f64; 2],
    /// Objects are placed in the last frame within `|x|, |y| <= spawn_extent`.
    pub spawn_extent: f64,
    /// Minimum BEV distance between the sensor and an object center in the last frame.
    pub min_distance: f64,
    /// Sensor origin in ego coordinates.
    pub sensor: [f64; 3],
    /// Expected number of points on an object 10 m from the sensor.
    pub point_density: f64,
    pub noise_sigma: f64,
    /// Constant ego velocity in world coordinates (m/s).
    pub ego_velocity: [f64; 2],
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_objects: 6,
            num_frames: 4,
            bucket_weights: [0.25, 0.25, 0.25, 0.25],
            speed_ranges: [[0.0, 0.0], [0.2, 1.0], [1.0, 5.0], [5.0, 12.0]],
            length: [4.5, 0.3],
            width: [2.0, 0.15],
            height: [1.6, 0.1],
            spawn_extent: 17.0,
            min_distance: 4.0,
            sensor: [0.0, 0.0, 1.9],
            point_density: 40.0,
            noise_sigma: 0.05,
            ego_velocity: [0.0, 0.0],
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.point_density >= 0.0) {
            return invalid("point_density must be non-negative");
        }
        if !(self.noise_sigma >= 0.0) {
            return invalid("noise_sigma must be non-negative");
        }
        if self.bucket_weights.iter().any(|w| !(*w >= 0.0)) || self.bucket_weights.iter().sum::<f64>() <= 0.0 {
            return invalid("bucket weights must be non-negative with positive sum");
        }
        for r in &self.speed_ranges {
            if !(r[0] >= 0.0 && r[1] >= r[0]) {
                return invalid(format!("bad speed range {r:?}"));
            }
        }
        for s in [self.length, self.width, self.height] {
            if !(s[0] > 0.0 && s[1] >= 0.0) {
                return invalid("size priors must have positive mean and non-negative std");
            }
        }
        if !(self.spawn_extent > 0.0) {
            return invalid("spawn_extent must be positive");
        }
        Ok(())
    }
}

/// Which box face a rendered point was sampled from, in box-local terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Face {
    PosX,
    NegX,
    PosY,
    NegY,
    Top,
}

impl Face {
    const SIDES: [Face; 4] = [Face::PosX, Face::NegX, Face::PosY, Face::NegY];

    fn local_normal(self) -> [f64; 3] {
        match self {
            Face::PosX => [1.0, 0.0, 0.0],
            Face::NegX => [-1.0, 0.0, 0.0],
            Face::PosY => [0.0, 1.0, 0.0],
            Face::NegY => [0.0, -1.0, 0.0],
            Face::Top => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RenderedPoints {
    pub points: Vec<[f64; 3]>,
    /// The same samples before noise.
    pub clean: Vec<[f64; 3]>,
    pub source_box: Vec<usize>,
    pub faces: Vec<Face>,
    /// Boxes skipped because the sensor was inside them.
    pub skipped_inside: usize,
}

fn face_geometry(b: &Box7, face: Face) -> ([f64; 3], f64) {
    let (hl, hw, hh) = (0.5 * b.length, 0.5 * b.width, 0.5 * b.height);
    match face {
        Face::PosX => ([hl, 0.0, 0.0], b.width * b.height),
        Face::NegX => ([-hl, 0.0, 0.0], b.width * b.height),
        Face::PosY => ([0.0, hw, 0.0], b.length * b.height),
        Face::NegY => ([0.0, -hw, 0.0], b.length * b.height),
        Face::Top => ([0.0, 0.0, hh], b.length * b.width),
    }
}

/// Faces of `b` whose outward normal points toward `sensor`, with the
/// projected-area weight used to split the point budget.
pub fn visible_faces(b: &Box7, sensor: [f64; 3]) -> Vec<(Face, f64)> {
    let s = b.to_local(sensor);
    let dist = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
    let mut out = Vec::new();
    for face in Face::SIDES.into_iter().chain([Face::Top]) {
        let (c, area) = face_geometry(b, face);
        let n = face.local_normal();
        let to_sensor = [s[0] - c[0], s[1] - c[1], s[2] - c[2]];
        let facing: f64 = (0..3).map(|i| n[i] * to_sensor[i]).sum();
        if facing > 0.0 {
            let cos = facing / dist.max(1e-9);
            out.push((face, area * cos));
        }
    }
    out
}

fn sample_on_face(b: &Box7, face: Face, rng: &mut impl Rng) -> [f64; 3] {
    let (hl, hw, hh) = (0.5 * b.length, 0.5 * b.width, 0.5 * b.height);
    let u = |rng: &mut dyn rand::RngCore, h: f64| rng.gen_range(-h..=h);
    let local = match face {
        Face::PosX => [hl, u(rng, hw), u(rng, hh)],
        Face::NegX => [-hl, u(rng, hw), u(rng, hh)],
        Face::PosY => [u(rng, hl), hw, u(rng, hh)],
        Face::NegY => [u(rng, hl), -hw, u(rng, hh)],
        Face::Top => [u(rng, hl), u(rng, hw), hh],
    };
    b.from_local(local)
}

/// Sample surface points on the sensor-facing faces of each box.
///
/// The expected count per box is `point_density * 10 / distance`.
pub fn render_frame_points(boxes: &[Box7], sensor: [f64; 3], cfg: &SceneConfig, rng: &mut impl Rng) -> Result<RenderedPoints> {
    if !(cfg.point_density >= 0.0) || !(cfg.noise_sigma >= 0.0) {
        return invalid("negative density or noise");
    }
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut out = RenderedPoints::default();
    for (bi, b) in boxes.iter().enumerate() {
        if b.contains(sensor, 0.0) {
            out.skipped_inside += 1;
            continue;
        }
        let d = ((b.cx - sensor[0]).powi(2) + (b.cy - sensor[1]).powi(2) + (b.cz - sensor[2]).powi(2))
            .sqrt()
            .max(1.0);
        let lambda = cfg.point_density * 10.0 / d;
        let count = if lambda > 0.0 {
            Poisson::new(lambda).map(|p| p.sample(rng) as usize).unwrap_or(0)
        } else {
            0
        };
        let faces = visible_faces(b, sensor);
        let total: f64 = faces.iter().map(|f| f.1).sum();
        if faces.is_empty() || total <= 0.0 {
            continue;
        }
        for _ in 0..count {
            let mut pick = rng.gen::<f64>() * total;
            let mut face = faces[faces.len() - 1].0;
            for &(f, w) in &faces {
                if pick < w {
                    face = f;
                    break;
                }
                pick -= w;
            }
            let p = sample_on_face(b, face, rng);
            let noisy = if cfg.noise_sigma > 0.0 {
                [p[0] + noise.sample(rng), p[1] + noise.sample(rng), p[2] + noise.sample(rng)]
            } else {
                p
            };
            out.clean.push(p);
            out.points.push(noisy);
            out.source_box.push(bi);
            out.faces.push(face);
        }
    }
    Ok(out)
}

struct Track {
    size: [f64; 3],
    heading: f64,
    velocity: [f64; 2],
    last_center: [f64; 2],
}

fn sample_size(rng: &mut impl Rng, prior: [f64; 2]) -> f64 {
    let n = Normal::new(prior[0], prior[1]).expect("valid prior");
    n.sample(rng).clamp(0.5 * prior[0], 1.5 * prior[0])
}

fn spawn_tracks(cfg: &SceneConfig, rng: &mut impl Rng) -> Vec<Track> {
    let total_w: f64 = cfg.bucket_weights.iter().sum();
    let mut tracks: Vec<Track> = Vec::with_capacity(cfg.num_objects);
    let mut placed: Vec<Box7> = Vec::new();
    for _ in 0..cfg.num_objects {
        for _attempt in 0..200 {
            let mut pick = rng.gen::<f64>() * total_w;
            let mut bucket = 3;
            for (i, w) in cfg.bucket_weights.iter().enumerate() {
                if pick < *w {
                    bucket = i;
                    break;
                }
                pick -= w;
            }
            let [lo, hi] = cfg.speed_ranges[bucket];
            let speed = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let size = [
                sample_size(rng, cfg.length),
                sample_size(rng, cfg.width),
                sample_size(rng, cfg.height),
            ];
            let e = cfg.spawn_extent;
            let c = [rng.gen_range(-e..e), rng.gen_range(-e..e)];
            if c[0].hypot(c[1]) < cfg.min_distance {
                continue;
            }
            let candidate = Box7 {
                cx: c[0],
                cy: c[1],
                cz: 0.5 * size[2],
                length: size[0] + 1.0,
                width: size[1] + 1.0,
                height: size[2],
                heading,
            };
            if placed
                .iter()
                .any(|p| crate::geometry::bev_intersection_area(p, &candidate) > 0.0)
            {
                continue;
            }
            placed.push(candidate);
            tracks.push(Track {
                size,
                heading,
                velocity: [speed * heading.cos(), speed * heading.sin()],
                last_center: c,
            });
            break;
        }
    }
    tracks
}

/// Generate a sequence deterministically from `cfg` (including its seed).
/// Object placements are drawn for the last frame so every target frame is
/// populated; earlier positions are extrapolated backwards.
pub fn generate_sequence(cfg: &SceneConfig) -> Result<Vec<FrameRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tracks = spawn_tracks(cfg, &mut rng);
    let last = cfg.num_frames.saturating_sub(1) as f64;
    let mut frames = Vec::with_capacity(cfg.num_frames);
    for f in 0..cfg.num_frames {
        let t = f as f64 * FRAME_DT;
        let ego = Pose::from_xyz_yaw(cfg.ego_velocity[0] * t, cfg.ego_velocity[1] * t, 0.0, 0.0);
        let world_to_ego = ego.inverse();
        let back = (last - f as f64) * FRAME_DT;
        let mut gt = Vec::with_capacity(tracks.len());
        for (id, tr) in tracks.iter().enumerate() {
            let world = Box7::new(
                tr.last_center[0] - tr.velocity[0] * back,
                tr.last_center[1] - tr.velocity[1] * back,
                0.5 * tr.size[2],
                tr.size[0],
                tr.size[1],
                tr.size[2],
                tr.heading,
            )?;
            let bbox = transform_box(&world, &world_to_ego)?;
            let rel_v = [
                tr.velocity[0] - cfg.ego_velocity[0],
                tr.velocity[1] - cfg.ego_velocity[1],
            ];
            let v = world_to_ego.apply_vector([rel_v[0], rel_v[1], 0.0]);
            gt.push(GtObject {
                bbox,
                velocity: [v[0], v[1]],
                track_id: id as u32,
            });
        }
        let boxes: Vec<Box7> = gt.iter().map(|g| g.bbox).collect();
        let rendered = render_frame_points(&boxes, cfg.sensor, cfg, &mut rng)?;
        if rendered.skipped_inside > 0 {
            log::warn!("frame {f}: sensor inside {} boxes", rendered.skipped_inside);
        }
        frames.push(FrameRecord {
            timestamp: t,
            ego_pose: ego,
            points: rendered.points,
            gt,
        });
    }
    Ok(frames)
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f32(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&(v as f32).to_le_bytes())
}

/// Serialize frames in the little-endian `M3DS` sequence format.
pub fn write_sequence(w: &mut impl Write, frames: &[FrameRecord]) -> Result<()> {
    w.write_all(SEQ_MAGIC)?;
    put_u32(w, SEQ_VERSION)?;
    put_u32(w, frames.len() as u32)?;
    for fr in frames {
        w.write_all(&fr.timestamp.to_le_bytes())?;
        for v in fr.ego_pose.m {
            w.write_all(&v.to_le_bytes())?;
        }
        put_u32(w, fr.points.len() as u32)?;
        for p in &fr.points {
            for &c in p {
                put_f32(w, c)?;
            }
        }
        put_u32(w, fr.gt.len() as u32)?;
        for g in &fr.gt {
            for v in g.bbox.to_array() {
                put_f32(w, v)?;
            }
            put_f32(w, g.velocity[0])?;
            put_f32(w, g.velocity[1])?;
            put_u32(w, g.track_id)?;
        }
    }
    Ok(())
}

pub fn sequence_bytes(frames: &[FrameRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_sequence(&mut buf, frames).expect("writing to memory cannot fail");
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data(format!("truncated sequence at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Read only the header, returning the frame count.
pub fn read_frame_count(bytes: &[u8]) -> Result<u32> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != SEQ_MAGIC {
        return Err(Error::Data("bad sequence magic".into()));
    }
    let version = c.u32()?;
    if version != SEQ_VERSION {
        return Err(Error::Data(format!("unsupported sequence version {version}")));
    }
    c.u32()
}

pub fn parse_sequence(bytes: &[u8]) -> Result<Vec<FrameRecord>> {
    let count = read_frame_count(bytes)? as usize;
    let mut c = Cursor { buf: bytes, pos: 12 };
    let mut frames = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let timestamp = c.f64()?;
        let mut m = [0.0; 16];
        for v in m.iter_mut() {
            *v = c.f64()?;
        }
        let ego_pose = Pose::from_matrix(m).map_err(|e| Error::Data(e.to_string()))?;
        let np = c.u32()? as usize;
        let mut points = Vec::with_capacity(np.min(1 << 20));
        for _ in 0..np {
            points.push([c.f32()?, c.f32()?, c.f32()?]);
        }
        let nb = c.u32()? as usize;
        let mut gt = Vec::with_capacity(nb.min(4096));
        for _ in 0..nb {
            let mut v = [0.0; 7];
            for x in v.iter_mut() {
                *x = c.f32()?;
            }
            let bbox = Box7::from_array(v).map_err(|e| Error::Data(e.to_string()))?;
            let velocity = [c.f32()?, c.f32()?];
            let track_id = c.u32()?;
            gt.push(GtObject {
                bbox,
                velocity,
                track_id,
            });
        }
        frames.push(FrameRecord {
            timestamp,
            ego_pose,
            points,
            gt,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Data("trailing bytes after last frame".into()));
    }
    Ok(frames)
}

pub fn read_sequence(r: &mut impl Read) -> Result<Vec<FrameRecord>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    parse_sequence(&buf)
}
