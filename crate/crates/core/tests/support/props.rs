//! Property checks, run through a deterministic proptest runner so the
//! same cases are drawn every time.

use std::f64::consts::PI;

use man3d::autodiff::{Graph, ParamStore, Tensor};
use man3d::evaluation::{average_precision, aph, match_detections, Detection};
use man3d::fsd::{fsd_assign, maxpool_nms, propose_from_head, AssignMode, FsdConfig, ProposalSet};
use man3d::geometry::{decode_residuals, encode_residuals, iou_3d, iou_bev, transform_box, wrap_angle, Box7, IouKind, Pose};
use man3d::losses::{objectness_loss_binary, smooth_l1, stage_loss, stage_targets, total_loss, DetLoss};
use man3d::memory_bank::{extract_roi_features, MemoryBank, MemoryEntry};
use man3d::mvaa::{Alignment, Mvaa, MvaaConfig, ViewInput};
use man3d::pillars::{kept_points_tensor, pillarize, scatter_to_grid, BevFeatureMap, FeatureGrid, PillarEncoder, PillarGrid};
use man3d::scene_sim::{generate_sequence, render_frame_points, sequence_bytes, Face, SceneConfig};
use man3d::trainer::Augmentation;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::oracle;

pub type Prop = fn(u32) -> Result<(), String>;

fn run<S: Strategy>(cases: u32, strat: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let cfg = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strat, test).map_err(|e| e.to_string())
}

fn box_strategy(spread: f64) -> impl Strategy<Value = Box7> {
    (-spread..spread, -spread..spread, -1.0..1.0, 0.5..6.0, 0.5..3.0, 0.5..3.0, -PI..PI)
        .prop_map(|(x, y, z, l, w, h, t): (f64, f64, f64, f64, f64, f64, f64)| Box7::new(x, y, z, l, w, h, t).unwrap())
}

fn near_pair() -> impl Strategy<Value = (Box7, Box7)> {
    (box_strategy(4.0), box_strategy(2.0)).prop_map(|(a, b)| {
        let b = Box7 {
            cx: a.cx + b.cx,
            cy: a.cy + b.cy,
            ..b
        };
        (a, b)
    })
}

// geometry

pub fn iou_symmetry_and_bounds(cases: u32) -> Result<(), String> {
    run(cases, near_pair(), |(a, b)| {
        for kind in [IouKind::Bev, IouKind::ThreeD] {
            let ab = kind.iou(&a, &b).unwrap();
            let ba = kind.iou(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((kind.iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }
        Ok(())
    })
}

pub fn iou_rigid_invariance(cases: u32) -> Result<(), String> {
    run(cases, (near_pair(), -30.0..30.0, -30.0..30.0, -PI..PI), |((a, b), x, y, yaw)| {
        let p = Pose::from_xyz_yaw(x, y, 0.3, yaw);
        let (pa, pb) = (transform_box(&a, &p).unwrap(), transform_box(&b, &p).unwrap());
        prop_assert!((iou_bev(&pa, &pb).unwrap() - iou_bev(&a, &b).unwrap()).abs() < 1e-9);
        prop_assert!((iou_3d(&pa, &pb).unwrap() - iou_3d(&a, &b).unwrap()).abs() < 1e-9);
        Ok(())
    })
}

pub fn residual_roundtrip(cases: u32) -> Result<(), String> {
    run(cases, (box_strategy(50.0), box_strategy(50.0)), |(g, r)| {
        let back = decode_residuals(&encode_residuals(&g, &r).unwrap(), &r).unwrap();
        let (x, y) = (g.to_array(), back.to_array());
        for i in 0..6 {
            prop_assert!((x[i] - y[i]).abs() < 1e-9, "component {}: {} vs {}", i, x[i], y[i]);
        }
        prop_assert!(wrap_angle(x[6] - y[6]).unwrap().abs() < 1e-9);
        Ok(())
    })
}

// scene_sim

fn face_normal(b: &Box7, f: Face) -> [f64; 3] {
    let (c, s) = (b.heading.cos(), b.heading.sin());
    let l = match f {
        Face::PosX => [1.0, 0.0],
        Face::NegX => [-1.0, 0.0],
        Face::PosY => [0.0, 1.0],
        Face::NegY => [0.0, -1.0],
        Face::Top => return [0.0, 0.0, 1.0],
    };
    [c * l[0] - s * l[1], s * l[0] + c * l[1], 0.0]
}

pub fn rendering_views_and_labels(cases: u32) -> Result<(), String> {
    let strat = (prop::collection::vec(box_strategy(20.0), 1..6), any::<u64>());
    run(cases, strat, |(boxes, seed)| {
        let cfg = SceneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let boxes: Vec<Box7> = boxes.into_iter().map(|b| Box7 { cz: 0.5 * b.height, ..b }).collect();
        let r = render_frame_points(&boxes, cfg.sensor, &cfg, &mut rng).unwrap();
        for (i, p) in r.clean.iter().enumerate() {
            let b = &boxes[r.source_box[i]];
            prop_assert!(b.contains(*p, 1e-9), "point {:?} outside its box", p);
            let n = face_normal(b, r.faces[i]);
            let to_sensor = [cfg.sensor[0] - p[0], cfg.sensor[1] - p[1], cfg.sensor[2] - p[2]];
            prop_assert!(n[0] * to_sensor[0] + n[1] * to_sensor[1] + n[2] * to_sensor[2] > 0.0);
        }
        Ok(())
    })
}

pub fn scene_reproducible(cases: u32) -> Result<(), String> {
    run(cases, (any::<u64>(), 1usize..4), |(seed, frames)| {
        let cfg = SceneConfig {
            seed,
            num_frames: frames,
            num_objects: 3,
            ..SceneConfig::default()
        };
        let a = sequence_bytes(&generate_sequence(&cfg).unwrap());
        prop_assert_eq!(a, sequence_bytes(&generate_sequence(&cfg).unwrap()));
        Ok(())
    })
}

// pillars

fn dyadic_grid() -> PillarGrid {
    PillarGrid {
        x_range: [0.0, 8.0],
        y_range: [0.0, 8.0],
        z_range: [-2.0, 4.0],
        nx: 16,
        ny: 16,
    }
}

fn encode(enc: &PillarEncoder, store: &ParamStore, pts: &[[f64; 3]], grid: &PillarGrid) -> Tensor {
    let a = pillarize(pts, grid);
    let mut g = Graph::new();
    let p = g.constant(kept_points_tensor(pts, &a));
    let f = enc.forward(&mut g, store, p, &a, grid);
    let d = scatter_to_grid(&mut g, f, &a, grid);
    g.value(d).clone()
}

/// Points strictly inside pillars (never on a boundary).
fn pillar_points() -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec((0usize..16, 0usize..16, 0.05..0.95, 0.05..0.95, -1.5..3.5), 1..60).prop_map(|v| {
        v.into_iter()
            .map(|(i, j, fx, fy, z): (usize, usize, f64, f64, f64)| [(i as f64 + fx) * 0.5, (j as f64 + fy) * 0.5, z])
            .collect()
    })
}

fn encoder() -> (PillarEncoder, ParamStore) {
    let mut store = ParamStore::new();
    let enc = PillarEncoder::new(&mut store, "p", &[8, 8], &mut ChaCha8Rng::seed_from_u64(3));
    (enc, store)
}

pub fn pillar_permutation_invariance(cases: u32) -> Result<(), String> {
    let (enc, store) = encoder();
    let grid = dyadic_grid();
    run(cases, (pillar_points(), any::<u64>()), |(pts, seed)| {
        let mut shuffled = pts.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let (a, b) = (encode(&enc, &store, &pts, &grid), encode(&enc, &store, &shuffled, &grid));
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        Ok(())
    })
}

pub fn pillar_translation_covariance(cases: u32) -> Result<(), String> {
    let (enc, store) = encoder();
    let grid = dyadic_grid();
    run(cases, (pillar_points(), -4isize..=4, -4isize..=4), |(pts, kx, ky)| {
        let moved: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + kx as f64 * 0.5, p[1] + ky as f64 * 0.5, p[2]]).collect();
        let (a, b) = (encode(&enc, &store, &pts, &grid), encode(&enc, &store, &moved, &grid));
        let c = a.cols();
        for i in 0..16isize {
            for j in 0..16isize {
                let (si, sj) = (i + kx, j + ky);
                if !(0..16).contains(&si) || !(0..16).contains(&sj) {
                    continue;
                }
                let (r0, r1) = ((i * 16 + j) as usize, (si * 16 + sj) as usize);
                for ch in 0..c {
                    prop_assert!((a.data[r0 * c + ch] - b.data[r1 * c + ch]).abs() < 1e-9);
                }
            }
        }
        Ok(())
    })
}

// fsd

pub fn nms_peaks_separated(cases: u32) -> Result<(), String> {
    let strat = (prop::collection::vec(0u8..6, 16 * 16), prop::sample::select(vec![1usize, 3, 5, 7]));
    run(cases, strat, |(raw, k)| {
        let scores: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        let out = maxpool_nms(&scores, 16, 16, k, 40).unwrap();
        let r = (k / 2) as isize;
        let peaks: Vec<usize> = out.iter().filter(|e| e.is_peak).map(|e| e.index).collect();
        for (n, &a) in peaks.iter().enumerate() {
            for &b in &peaks[n + 1..] {
                let (di, dj) = ((a / 16) as isize - (b / 16) as isize, (a % 16) as isize - (b % 16) as isize);
                prop_assert!(di.abs() > r || dj.abs() > r, "peaks {} and {} share a window", a, b);
            }
        }
        let idx: std::collections::HashSet<usize> = out.iter().map(|e| e.index).collect();
        prop_assert_eq!(idx.len(), out.len());
        Ok(())
    })
}

fn small_fsd() -> (FsdConfig, FeatureGrid) {
    let cfg = FsdConfig {
        grid: PillarGrid {
            x_range: [-8.0, 8.0],
            y_range: [-8.0, 8.0],
            z_range: [-2.0, 4.0],
            nx: 16,
            ny: 16,
        },
        nms_kernel: 3,
        num_proposals: 12,
        num_bins: 4,
        ..FsdConfig::default()
    };
    (cfg.clone(), FeatureGrid::new(cfg.grid, 1).unwrap())
}

fn random_proposals(cfg: &FsdConfig, geom: &FeatureGrid, seed: u64) -> ProposalSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = man3d::fsd::head_channels(cfg.num_bins);
    let data = (0..geom.num_cells() * c).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
    propose_from_head(&Tensor::matrix(geom.num_cells(), c, data), geom, cfg, 0).unwrap()
}

pub fn assignment_complete(cases: u32) -> Result<(), String> {
    let (cfg, geom) = small_fsd();
    run(cases, (prop::collection::vec(box_strategy(7.5), 0..8), any::<u64>()), |(gts, seed)| {
        let props = random_proposals(&cfg, &geom, seed);
        for mode in [AssignMode::Hungarian, AssignMode::Center] {
            let a = fsd_assign(&props, &gts, &geom, IouKind::Bev, mode).unwrap();
            prop_assert_eq!(a.positives.len(), gts.len());
            let mut gt_ids: Vec<usize> = a.positives.iter().map(|p| p.1).collect();
            gt_ids.sort_unstable();
            prop_assert_eq!(gt_ids, (0..gts.len()).collect::<Vec<_>>());
            let mut sites: Vec<usize> = a.positives.iter().map(|p| a.sites[p.0]).collect();
            sites.sort_unstable();
            sites.dedup();
            prop_assert_eq!(sites.len(), gts.len());
        }
        Ok(())
    })
}

// memory bank

fn bilinear(map: &Tensor, h: usize, w: usize, u: f64, v: f64, ch: usize) -> f64 {
    let (u0, v0) = (u.floor(), v.floor());
    let mut s = 0.0;
    for (i, wu) in [(u0, 1.0 - (u - u0)), (u0 + 1.0, u - u0)] {
        for (j, wv) in [(v0, 1.0 - (v - v0)), (v0 + 1.0, v - v0)] {
            if i >= 0.0 && j >= 0.0 && (i as usize) < h && (j as usize) < w {
                s += wu * wv * map.data[(i as usize * w + j as usize) * map.cols() + ch];
            }
        }
    }
    s
}

fn roi_map(seed: u64) -> BevFeatureMap {
    let geom = FeatureGrid::new(dyadic_grid(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..256 * 3).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
    BevFeatureMap::new(geom, Tensor::matrix(256, 3, data)).unwrap()
}

pub fn roi_order_invariance(cases: u32) -> Result<(), String> {
    let strat = (box_strategy(3.0), 1usize..6, any::<u64>());
    run(cases, strat, |(b, k, seed)| {
        let fmap = roi_map(seed);
        let b = Box7 { cx: b.cx + 4.0, cy: b.cy + 4.0, ..b };
        let got = extract_roi_features(&fmap, &[b], k).unwrap();
        let mut kp = oracle::key_points(&b, k);
        rand::seq::SliceRandom::shuffle(kp.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        for ch in 0..3 {
            let mean = kp.iter().map(|p| bilinear(&fmap.data, 16, 16, p[0] / 0.5 - 0.5, p[1] / 0.5 - 0.5, ch)).sum::<f64>() / kp.len() as f64;
            prop_assert!((got.data[ch] - mean).abs() < 1e-12);
        }
        Ok(())
    })
}

pub fn roi_rotation_invariance(cases: u32) -> Result<(), String> {
    let grid = PillarGrid {
        x_range: [-8.0, 8.0],
        y_range: [-8.0, 8.0],
        z_range: [-2.0, 4.0],
        nx: 16,
        ny: 16,
    };
    let geom = FeatureGrid::new(grid, 1).unwrap();
    run(cases, (box_strategy(5.0), 1usize..6, any::<u64>()), |(b, k, seed)| {
        let src = roi_map(seed).data;
        let mut rot = vec![0.0; src.data.len()];
        for a in 0..16 {
            for c in 0..16 {
                for ch in 0..3 {
                    rot[(a * 16 + c) * 3 + ch] = src.data[(c * 16 + (15 - a)) * 3 + ch];
                }
            }
        }
        let m0 = BevFeatureMap::new(geom, src.clone()).unwrap();
        let m1 = BevFeatureMap::new(geom, Tensor::matrix(256, 3, rot)).unwrap();
        let b1 = Box7 {
            cx: -b.cy,
            cy: b.cx,
            heading: wrap_angle(b.heading + PI / 2.0).unwrap(),
            ..b
        };
        let f0 = extract_roi_features(&m0, &[b], k).unwrap();
        let f1 = extract_roi_features(&m1, &[b1], k).unwrap();
        for (x, y) in f0.data.iter().zip(&f1.data) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        Ok(())
    })
}

fn entry(frame: usize, tag: f64) -> MemoryEntry {
    let geom = FeatureGrid::new(dyadic_grid(), 4).unwrap();
    let n = 2;
    MemoryEntry {
        proposals: ProposalSet {
            boxes: vec![Box7::new(tag, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0).unwrap(); n],
            scores: vec![tag; n],
            locations: vec![0; n],
            valid: vec![true; n],
            is_peak: vec![true; n],
            frame_index: frame,
            features: None,
        },
        fmap: BevFeatureMap::new(geom, Tensor::full(vec![geom.num_cells(), 2], tag)).unwrap(),
        pose: Pose::from_xyz_yaw(tag, 0.0, 0.0, 0.0),
        frame_index: frame,
    }
}

pub fn bank_fifo_determinism(cases: u32) -> Result<(), String> {
    run(cases, (1usize..6, prop::collection::vec(1usize..4, 0..15)), |(cap, gaps)| {
        let mut frames = Vec::new();
        let mut f = 0;
        for g in gaps {
            f += g;
            frames.push(f);
        }
        let mut a = MemoryBank::new(cap).unwrap();
        let mut b = MemoryBank::new(cap).unwrap();
        let mut evicted = Vec::new();
        for &fr in &frames {
            if let Some(e) = a.push(entry(fr, fr as f64)).unwrap() {
                evicted.push(e.frame_index);
            }
            b.push(entry(fr, fr as f64)).unwrap();
            let snap_a: Vec<_> = a.entries().map(|e| (e.frame_index, e.proposals.clone(), e.fmap.data.clone())).collect();
            let snap_b: Vec<_> = b.entries().map(|e| (e.frame_index, e.proposals.clone(), e.fmap.data.clone())).collect();
            prop_assert_eq!(snap_a, snap_b);
        }
        let keep = frames.len().min(cap);
        let held: Vec<usize> = a.entries().map(|e| e.frame_index).collect();
        prop_assert_eq!(&held[..], &frames[frames.len() - keep..]);
        prop_assert_eq!(&evicted[..], &frames[..frames.len() - keep]);
        Ok(())
    })
}

// mvaa

fn rand_feats(rng: &mut ChaCha8Rng, rows: usize, c: usize) -> Tensor {
    Tensor::matrix(rows, c, (0..rows * c).map(|_| rand::Rng::gen_range(rng, -1.0..1.0)).collect())
}

fn line_boxes(n: usize, off: f64) -> Vec<Box7> {
    (0..n).map(|i| Box7::new(i as f64 * 2.0 + off, off, 0.8, 4.0, 1.8, 1.6, 0.1 * i as f64).unwrap()).collect()
}

pub fn alignment_softmax_and_masking(cases: u32) -> Result<(), String> {
    let strat = (1usize..5, 1usize..7, any::<u64>(), prop::collection::vec(any::<bool>(), 6), 1usize..3);
    run(cases, strat, |(n, m, seed, mask, heads)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = MvaaConfig { heads, ..MvaaConfig::default() };
        let mut store = ParamStore::new();
        let al = Alignment::new(&mut store, "a", 4, &cfg, &mut rng);
        let valid: Vec<bool> = mask[..m].to_vec();
        let mut g = Graph::new();
        let ft = g.constant(rand_feats(&mut rng, n, 4));
        let fs = g.constant(rand_feats(&mut rng, m, 4));
        let out = al.forward(&mut g, &store, ft, &line_boxes(n, 0.0), fs, &line_boxes(m, 0.5), &valid, 1.0).unwrap();
        if !valid.iter().any(|v| *v) {
            prop_assert!(out.all_masked && out.attention.is_none());
            prop_assert!(g.value(out.features).data.iter().all(|v| *v == 0.0));
            return Ok(());
        }
        let a = g.value(out.attention.unwrap());
        for r in 0..n {
            let row = a.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (j, &ok) in valid.iter().enumerate() {
                if !ok {
                    prop_assert_eq!(row[j], 0.0);
                }
            }
        }
        Ok(())
    })
}

pub fn alignment_key_permutation(cases: u32) -> Result<(), String> {
    run(cases, (2usize..7, any::<u64>()), |(m, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let al = Alignment::new(&mut store, "a", 4, &MvaaConfig::default(), &mut rng);
        let ft = rand_feats(&mut rng, 3, 4);
        let fs = rand_feats(&mut rng, m, 4);
        let bs = line_boxes(m, 0.5);
        let valid: Vec<bool> = (0..m).map(|j| j != 1).collect();
        let mut perm: Vec<usize> = (0..m).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let run_once = |fs: Tensor, bs: &[Box7], valid: &[bool]| {
            let mut g = Graph::new();
            let a = g.constant(ft.clone());
            let b = g.constant(fs);
            let o = al.forward(&mut g, &store, a, &line_boxes(3, 0.0), b, bs, valid, 2.0).unwrap();
            g.value(o.features).clone()
        };
        let base = run_once(fs.clone(), &bs, &valid);
        let pfs = Tensor::matrix(m, 4, perm.iter().flat_map(|&i| fs.row(i).to_vec()).collect());
        let pbs: Vec<Box7> = perm.iter().map(|&i| bs[i]).collect();
        let pv: Vec<bool> = perm.iter().map(|&i| valid[i]).collect();
        let permuted = run_once(pfs, &pbs, &pv);
        for (x, y) in base.data.iter().zip(&permuted.data) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        Ok(())
    })
}

struct ToyStage {
    mvaa: Mvaa,
    store: ParamStore,
    ft: Tensor,
    views: Vec<(Tensor, Vec<Box7>, Vec<bool>, f64)>,
}

fn toy_stage(seed: u64, views: usize) -> ToyStage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mvaa = Mvaa::new(&mut store, 4, &MvaaConfig::default(), &mut rng).unwrap();
    let ft = rand_feats(&mut rng, 3, 4);
    let views = (0..views)
        .map(|s| (rand_feats(&mut rng, 4, 4), line_boxes(4, 0.2 * s as f64), vec![true, true, s % 2 == 0, true], (views - s) as f64))
        .collect();
    ToyStage { mvaa, store, ft, views }
}

impl ToyStage {
    fn run(&self, order: &[usize], mask_past: bool) -> (Tensor, Tensor, Vec<Tensor>) {
        let mut g = Graph::new();
        let ft = g.constant(self.ft.clone());
        let vs: Vec<ViewInput> = order
            .iter()
            .map(|&s| {
                let (f, b, v, dt) = &self.views[s];
                let masked = mask_past && *dt != 0.0;
                ViewInput {
                    features: g.constant(f.clone()),
                    boxes: b.clone(),
                    valid: if masked { vec![false; v.len()] } else { v.clone() },
                    dt: *dt,
                }
            })
            .collect();
        let out = self.mvaa.forward(&mut g, &self.store, ft, &line_boxes(3, 0.0), &vs).unwrap();
        let cv = out.crossview.iter().map(|c| g.value(c.1).clone()).collect();
        (g.value(out.aggregated).clone(), g.value(out.residuals).clone(), cv)
    }
}

pub fn aggregation_view_permutation(cases: u32) -> Result<(), String> {
    run(cases, (any::<u64>(), 2usize..5, any::<u64>()), |(seed, n, pseed)| {
        let toy = toy_stage(seed, n);
        let order: Vec<usize> = (0..n).collect();
        let mut perm = order.clone();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(pseed));
        let (a0, r0, c0) = toy.run(&order, false);
        let (a1, r1, c1) = toy.run(&perm, false);
        for (x, y) in a0.data.iter().zip(&a1.data).chain(r0.data.iter().zip(&r1.data)) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        for (k, &s) in perm.iter().enumerate() {
            for (x, y) in c0[s].data.iter().zip(&c1[k].data) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
        Ok(())
    })
}

pub fn masked_past_equals_target_only(cases: u32) -> Result<(), String> {
    run(cases, (any::<u64>(), 2usize..5), |(seed, n)| {
        let mut toy = toy_stage(seed, n);
        let last = toy.views.len() - 1;
        toy.views[last].3 = 0.0;
        toy.views[last].2 = vec![true; 4];
        let all: Vec<usize> = (0..n).collect();
        let (a0, r0, _) = toy.run(&all, true);
        let (a1, r1, _) = toy.run(&[last], false);
        prop_assert_eq!(a0, a1);
        prop_assert_eq!(r0, r1);
        Ok(())
    })
}

// losses

pub fn losses_nonnegative_and_additive(cases: u32) -> Result<(), String> {
    let strat = (any::<u64>(), prop::collection::vec(any::<bool>(), 4), 0usize..3);
    run(cases, strat, |(seed, mut valid, ngt)| {
        valid[0] = true;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let props = line_boxes(4, 0.0);
        let gts: Vec<Box7> = props.iter().take(ngt).map(|b| Box7 { cx: b.cx + 0.3, ..*b }).collect();
        let t = stage_targets(&props, &valid, &gts, IouKind::ThreeD).unwrap();
        let mut g = Graph::new();
        let det = |g: &mut Graph, rng: &mut ChaCha8Rng| -> DetLoss {
            let o = g.input(rand_feats(rng, 4, 1));
            let r = g.input(rand_feats(rng, 4, 7));
            stage_loss(g, o, r, &valid, std::slice::from_ref(&t), 1.0).unwrap()
        };
        let (a, b, c) = (det(&mut g, &mut rng), det(&mut g, &mut rng), det(&mut g, &mut rng));
        for d in [&a, &b, &c] {
            prop_assert!(g.value(d.value).item() >= 0.0);
        }
        let (total, bundle) = total_loss(&mut g, &a, Some(&b), Some(&c));
        prop_assert_eq!(g.value(total).item(), bundle.l_fsd + bundle.l_mvaa + bundle.l_cv);
        prop_assert_eq!(bundle.l_total, bundle.l_fsd + bundle.l_mvaa + bundle.l_cv);
        let pred = g.input(rand_feats(&mut rng, 3, 6));
        let target: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        let sl = smooth_l1(&mut g, pred, &target, 1.0).unwrap().value.unwrap();
        prop_assert!(g.value(sl).item() >= 0.0);
        Ok(())
    })
}

pub fn objectness_mean_normalization(cases: u32) -> Result<(), String> {
    run(cases, prop::collection::vec((-6.0..6.0, any::<bool>()), 1..20), |items| {
        let eval = |items: &[(f64, bool)]| {
            let mut g = Graph::new();
            let l = g.input(Tensor::matrix(items.len(), 1, items.iter().map(|x| x.0).collect()));
            let pos: Vec<bool> = items.iter().map(|x| x.1).collect();
            let v = objectness_loss_binary(&mut g, l, &pos).unwrap();
            g.value(v).item()
        };
        let doubled: Vec<(f64, bool)> = items.iter().chain(items.iter()).copied().collect();
        prop_assert!((eval(&items) - eval(&doubled)).abs() < 1e-9);
        Ok(())
    })
}

// evaluation

fn eval_case() -> impl Strategy<Value = (Vec<Box7>, Vec<(usize, f64, f64, f64, f64)>)> {
    (
        prop::collection::vec(box_strategy(20.0), 1..8),
        prop::collection::vec((0usize..8, -1.5..1.5, -1.5..1.5, -0.6..0.6, 0.0..1.0), 0..14),
    )
}

fn make_preds(gts: &[Box7], raw: &[(usize, f64, f64, f64, f64)]) -> Vec<Detection> {
    raw.iter()
        .map(|&(i, dx, dy, dh, score)| {
            let g = gts[i % gts.len()];
            Detection {
                bbox: Box7::new(g.cx + dx, g.cy + dy, g.cz, g.length, g.width, g.height, g.heading + dh).unwrap(),
                score,
            }
        })
        .collect()
}

pub fn ap_threshold_monotone(cases: u32) -> Result<(), String> {
    run(cases, eval_case(), |(gts, raw)| {
        let preds = make_preds(&gts, &raw);
        let mut last = f64::INFINITY;
        for thr in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let m = match_detections(&preds, &gts, thr, IouKind::Bev).unwrap();
            let ap = average_precision(&m.labels, gts.len()).unwrap();
            prop_assert!(ap <= last + 1e-12, "AP rose from {} to {} at {}", last, ap, thr);
            last = ap;
        }
        Ok(())
    })
}

pub fn aph_bounded_by_ap(cases: u32) -> Result<(), String> {
    run(cases, (eval_case(), any::<bool>()), |((gts, raw), exact_heading)| {
        let raw: Vec<_> = raw.into_iter().map(|(i, dx, dy, dh, s)| (i, dx, dy, if exact_heading { 0.0 } else { dh }, s)).collect();
        let preds = make_preds(&gts, &raw);
        let m = match_detections(&preds, &gts, 0.3, IouKind::Bev).unwrap();
        let (ap, h) = (average_precision(&m.labels, gts.len()).unwrap(), aph(&m.labels, gts.len()).unwrap());
        prop_assert!(h <= ap + 1e-12);
        let errs: Vec<f64> = m
            .labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.tp)
            .map(|(i, _)| wrap_angle(preds[i].bbox.heading - gts[m.pred_to_gt[i].unwrap()].heading).unwrap().abs())
            .collect();
        let all_zero = errs.iter().all(|e| *e == 0.0);
        prop_assert_eq!(h == ap, all_zero || ap == 0.0);
        Ok(())
    })
}

pub fn ap_score_transform_invariance(cases: u32) -> Result<(), String> {
    run(cases, eval_case(), |(gts, raw)| {
        let preds = make_preds(&gts, &raw);
        let moved: Vec<Detection> = preds.iter().map(|d| Detection { score: (3.0 * d.score).exp() + 1.0, ..*d }).collect();
        let a = match_detections(&preds, &gts, 0.5, IouKind::Bev).unwrap();
        let b = match_detections(&moved, &gts, 0.5, IouKind::Bev).unwrap();
        prop_assert_eq!(average_precision(&a.labels, gts.len()), average_precision(&b.labels, gts.len()));
        Ok(())
    })
}

// trainer

pub fn augmentation_keeps_points_in_boxes(cases: u32) -> Result<(), String> {
    let strat = (prop::collection::vec(box_strategy(20.0), 1..5), any::<u64>(), any::<bool>(), -PI..PI);
    run(cases, strat, |(boxes, seed, flip_y, rotation)| {
        let cfg = SceneConfig::default();
        let boxes: Vec<Box7> = boxes.into_iter().map(|b| Box7 { cz: 0.5 * b.height, ..b }).collect();
        let r = render_frame_points(&boxes, cfg.sensor, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let aug = Augmentation { flip_y, rotation };
        let moved: Vec<Box7> = boxes.iter().map(|b| aug.apply_box(b).unwrap()).collect();
        for (i, p) in r.clean.iter().enumerate() {
            prop_assert!(moved[r.source_box[i]].contains(aug.apply_point(*p), 1e-9));
        }
        Ok(())
    })
}

/// Every property with its name.
pub fn all() -> Vec<(&'static str, Prop)> {
    vec![
        ("iou_symmetry_and_bounds", iou_symmetry_and_bounds),
        ("iou_rigid_invariance", iou_rigid_invariance),
        ("residual_roundtrip", residual_roundtrip),
        ("rendering_views_and_labels", rendering_views_and_labels),
        ("scene_reproducible", scene_reproducible),
        ("pillar_permutation_invariance", pillar_permutation_invariance),
        ("pillar_translation_covariance", pillar_translation_covariance),
        ("nms_peaks_separated", nms_peaks_separated),
        ("assignment_complete", assignment_complete),
        ("roi_order_invariance", roi_order_invariance),
        ("roi_rotation_invariance", roi_rotation_invariance),
        ("bank_fifo_determinism", bank_fifo_determinism),
        ("alignment_softmax_and_masking", alignment_softmax_and_masking),
        ("alignment_key_permutation", alignment_key_permutation),
        ("aggregation_view_permutation", aggregation_view_permutation),
        ("masked_past_equals_target_only", masked_past_equals_target_only),
        ("losses_nonnegative_and_additive", losses_nonnegative_and_additive),
        ("objectness_mean_normalization", objectness_mean_normalization),
        ("ap_threshold_monotone", ap_threshold_monotone),
        ("aph_bounded_by_ap", aph_bounded_by_ap),
        ("ap_score_transform_invariance", ap_score_transform_invariance),
        ("augmentation_keeps_points_in_boxes", augmentation_keeps_points_in_boxes),
    ]
}
