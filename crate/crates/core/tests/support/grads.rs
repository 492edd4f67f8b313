//! Finite-difference checks of losses, attention stages and the pillar encoder.

use man3d::autodiff::{Graph, ParamStore, Tensor, Var};
use man3d::fsd::{fsd_assign, head_channels, propose_from_head, AssignMode, FsdConfig};
use man3d::geometry::{Box7, IouKind};
use man3d::losses::{
    bin_orientation_loss, fsd_loss, objectness_loss_binary, objectness_loss_iou_target, smooth_l1, stage_loss, stage_targets, total_loss,
};
use man3d::mvaa::{Aggregation, Alignment, Mvaa, MvaaConfig, ViewInput};
use man3d::pillars::{kept_points_tensor, pillarize, FeatureGrid, PillarEncoder, PillarGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fd::{check_input, check_params, FdResult};
use super::Check;

fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// Scalar probe `sum(y * w)` with fixed pseudo-random `w`.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let w = g.constant(Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()));
    let m = g.mul(y, w);
    g.sum(m)
}

fn boxes(rng: &mut impl Rng, n: usize) -> Vec<Box7> {
    (0..n)
        .map(|i| {
            Box7::new(
                i as f64 * 1.5 + rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.5..0.5),
                0.8,
                4.0 + rng.gen_range(-0.5..0.5),
                1.8,
                1.6,
                rng.gen_range(-1.0..1.0),
            )
            .unwrap()
        })
        .collect()
}

fn named(name: &str, r: FdResult) -> Result<FdResult, String> {
    if r.ok() {
        Ok(r)
    } else {
        Err(format!("{name}: max relative error {:.2e} over {} entries", r.max_rel, r.checked))
    }
}

pub fn losses(seed: u64) -> Result<FdResult, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = rand_tensor(&mut rng, 6, 1, 3.0);
    let pos = [true, false, false, true, false, false];
    let mut r = named(
        "objectness (binary)",
        check_input(&|g, x| objectness_loss_binary(g, x, &pos).unwrap(), &logits),
    )?;
    let iou_t = [0.9, 0.0, 0.3, 0.55, 0.0, 0.1];
    r = r.merge(named(
        "objectness (IoU targets)",
        check_input(&|g, x| objectness_loss_iou_target(g, x, &iou_t).unwrap(), &logits),
    )?);
    let pred = rand_tensor(&mut rng, 4, 7, 2.0);
    let target: Vec<f64> = (0..28).map(|_| rng.gen_range(-2.0..2.0)).collect();
    r = r.merge(named(
        "smooth-L1",
        check_input(&|g, x| smooth_l1(g, x, &target, 1.0).unwrap().value.unwrap(), &pred),
    )?);
    let nb = 5;
    let both = rand_tensor(&mut rng, 4, 2 * nb, 1.5);
    let headings: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
    r = r.merge(named(
        "bin orientation",
        check_input(
            &|g, x| {
                let l = g.slice_cols(x, 0, nb);
                let res = g.slice_cols(x, nb, nb);
                bin_orientation_loss(g, Some(l), res, &headings, nb, 1.0).unwrap().value.unwrap()
            },
            &both,
        ),
    )?);

    // dense head loss on an 8 x 8 map
    let cfg = FsdConfig {
        grid: PillarGrid {
            x_range: [-4.0, 4.0],
            y_range: [-4.0, 4.0],
            z_range: [-2.0, 4.0],
            nx: 8,
            ny: 8,
        },
        nms_kernel: 3,
        num_proposals: 4,
        num_bins: 4,
        ..FsdConfig::default()
    };
    let geom = FeatureGrid::new(cfg.grid, 1).unwrap();
    let head = rand_tensor(&mut rng, 64, head_channels(cfg.num_bins), 1.0);
    let gts = vec![
        Box7::new(-1.2, 0.7, 0.8, 4.2, 1.9, 1.6, 0.4).unwrap(),
        Box7::new(2.3, -2.1, 0.9, 3.9, 1.7, 1.5, -2.0).unwrap(),
    ];
    let props = propose_from_head(&head, &geom, &cfg, 0).unwrap();
    let assign = fsd_assign(&props, &gts, &geom, IouKind::Bev, AssignMode::Hungarian).unwrap();
    let prior = cfg.prior();
    r = r.merge(named(
        "FSD loss",
        check_input(&|g, x| fsd_loss(g, x, &assign, &gts, &geom, &prior, 4, 1.0).unwrap().value, &head),
    )?);

    // second-stage and total loss
    let prop_boxes = boxes(&mut rng, 4);
    let valid = [true, true, false, true];
    let stage_gts = vec![prop_boxes[0], prop_boxes[3]];
    let t = stage_targets(&prop_boxes, &valid, &stage_gts, IouKind::ThreeD).unwrap();
    let out = rand_tensor(&mut rng, 8, 8, 1.0);
    let two = vec![t.clone(), t.clone()];
    let single = rand_tensor(&mut rng, 4, 8, 1.0);
    r = r.merge(named(
        "stage loss",
        check_input(
            &|g, x| {
                let o = g.slice_cols(x, 0, 1);
                let res = g.slice_cols(x, 1, 7);
                stage_loss(g, o, res, &valid, std::slice::from_ref(&t), 1.0).unwrap().value
            },
            &single,
        ),
    )?);
    r = r.merge(named(
        "stacked stage loss",
        check_input(
            &|g, x| {
                let o = g.slice_cols(x, 0, 1);
                let res = g.slice_cols(x, 1, 7);
                stage_loss(g, o, res, &valid, &two, 1.0).unwrap().value
            },
            &out,
        ),
    )?);
    r = r.merge(named(
        "total loss",
        check_input(
            &|g, x| {
                let head_in = g.slice_cols(x, 0, 8);
                let pad = g.constant(Tensor::zeros(vec![8, head_channels(4) - 8]));
                let full = g.concat_cols(&[head_in, pad]);
                let fill = g.constant(Tensor::zeros(vec![56, head_channels(4)]));
                let dense = g.concat_rows(&[full, fill]);
                let lf = fsd_loss(g, dense, &assign, &gts, &geom, &prior, 4, 1.0).unwrap();
                let o = g.slice_cols(x, 0, 1);
                let res = g.slice_cols(x, 1, 7);
                let lm = stage_loss(g, o, res, &valid, &two, 1.0).unwrap();
                let o4 = g.gather_rows(o, &[4, 5, 6, 7]);
                let r4 = g.gather_rows(res, &[4, 5, 6, 7]);
                let lc = stage_loss(g, o4, r4, &valid, std::slice::from_ref(&t), 1.0).unwrap();
                total_loss(g, &lf, Some(&lm), Some(&lc)).0
            },
            &out,
        ),
    )?);
    Ok(r)
}

fn toy_views(rng: &mut impl Rng, c: usize, b_t: &[Box7]) -> Vec<(Tensor, Vec<Box7>, Vec<bool>, f64)> {
    (0..2)
        .map(|s| {
            let m = 3 + s;
            let mut bs: Vec<Box7> = b_t.iter().take(m).map(|b| Box7 { cx: b.cx + 0.4 * (s + 1) as f64, ..*b }).collect();
            while bs.len() < m {
                bs.push(b_t[0]);
            }
            let mut valid = vec![true; m];
            valid[m - 1] = s == 0;
            (rand_tensor(rng, m, c, 1.0), bs, valid, (s + 1) as f64)
        })
        .collect()
}

pub fn attention(seed: u64) -> Result<FdResult, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 4;
    let b_t = boxes(&mut rng, 4);
    let f_t = rand_tensor(&mut rng, 4, c, 1.0);
    let views = toy_views(&mut rng, c, &b_t);
    let mut result = FdResult::default();
    for heads in [1, 2] {
        let cfg = MvaaConfig {
            heads,
            ..MvaaConfig::default()
        };
        let mut store = ParamStore::new();
        let align = Alignment::new(&mut store, "a", c, &cfg, &mut rng);
        let (fs, bs, valid, dt) = &views[0];
        let fwd = |g: &mut Graph, st: &ParamStore, ft: Var| {
            let fsv = g.constant(fs.clone());
            let y = align.forward(g, st, ft, &b_t, fsv, bs, valid, *dt).unwrap().features;
            probe(g, y, 11)
        };
        result = result.merge(named(
            "alignment (query input)",
            check_input(&|g, x| fwd(g, &store, x), &f_t),
        )?);
        result = result.merge(named(
            "alignment (key input)",
            check_input(
                &|g, x| {
                    let ft = g.constant(f_t.clone());
                    let y = align.forward(g, &store, ft, &b_t, x, bs, valid, *dt).unwrap().features;
                    probe(g, y, 12)
                },
                fs,
            ),
        )?);
        result = result.merge(named(
            "alignment (parameters)",
            check_params(
                &|g, st| {
                    let ft = g.constant(f_t.clone());
                    fwd(g, st, ft)
                },
                &store,
            ),
        )?);
        let agg = Aggregation::new(&mut store, "g", c, &cfg, &mut rng);
        let v2 = rand_tensor(&mut rng, 8, c, 1.0);
        let stage = |g: &mut Graph, st: &ParamStore, ft: Var, v: Var| {
            let a = g.gather_rows(v, &[0, 1, 2, 3]);
            let b = g.gather_rows(v, &[4, 5, 6, 7]);
            let y = agg.forward(g, st, ft, &[a, b], &[true, true]).unwrap();
            probe(g, y, 13)
        };
        result = result.merge(named(
            "aggregation (view input)",
            check_input(
                &|g, v| {
                    let ft = g.constant(f_t.clone());
                    stage(g, &store, ft, v)
                },
                &v2,
            ),
        )?);
        result = result.merge(named(
            "aggregation (query input)",
            check_input(
                &|g, ft| {
                    let v = g.constant(v2.clone());
                    stage(g, &store, ft, v)
                },
                &f_t,
            ),
        )?);
        result = result.merge(named(
            "attention stages (parameters)",
            check_params(
                &|g, st| {
                    let ft = g.constant(f_t.clone());
                    let v = g.constant(v2.clone());
                    stage(g, st, ft, v)
                },
                &store,
            ),
        )?);
    }
    Ok(result)
}

/// Whole second stage, 4 proposals and 2 views: every parameter of alignment,
/// aggregation and both heads.
pub fn mvaa_end_to_end(seed: u64) -> Result<FdResult, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 4;
    let cfg = MvaaConfig::default();
    let mut store = ParamStore::new();
    let mvaa = Mvaa::new(&mut store, c, &cfg, &mut rng).unwrap();
    let b_t = boxes(&mut rng, 4);
    let f_t = rand_tensor(&mut rng, 4, c, 1.0);
    let views = toy_views(&mut rng, c, &b_t);
    let valid = vec![true; 4];
    let gts = vec![b_t[1], Box7 { cx: b_t[2].cx + 0.3, ..b_t[2] }];
    let t = stage_targets(&b_t, &valid, &gts, IouKind::ThreeD).unwrap();
    let build = |g: &mut Graph, st: &ParamStore, ft: Var| {
        let vs: Vec<ViewInput> = views
            .iter()
            .map(|(f, b, v, dt)| ViewInput {
                features: g.constant(f.clone()),
                boxes: b.clone(),
                valid: v.clone(),
                dt: *dt,
            })
            .collect();
        let out = mvaa.forward(g, st, ft, &b_t, &vs).unwrap();
        let lm = stage_loss(g, out.objectness, out.residuals, &valid, std::slice::from_ref(&t), 1.0).unwrap();
        let objs: Vec<Var> = out.crossview.iter().map(|x| x.0).collect();
        let regs: Vec<Var> = out.crossview.iter().map(|x| x.1).collect();
        let o = g.concat_rows(&objs);
        let r = g.concat_rows(&regs);
        let lc = stage_loss(g, o, r, &valid, &vec![t.clone(); objs.len()], 1.0).unwrap();
        g.add(lm.value, lc.value)
    };
    let r = named(
        "MVAA (parameters)",
        check_params(
            &|g, st| {
                let ft = g.constant(f_t.clone());
                build(g, st, ft)
            },
            &store,
        ),
    )?;
    let r2 = named("MVAA (target features)", check_input(&|g, x| build(g, &store, x), &f_t))?;
    Ok(r.merge(r2))
}

/// d(pillar features)/d(point coordinates).
pub fn pillar_encoder(seed: u64) -> Result<FdResult, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = PillarGrid {
        x_range: [0.0, 2.0],
        y_range: [0.0, 2.0],
        z_range: [-2.0, 4.0],
        nx: 2,
        ny: 2,
    };
    let mut store = ParamStore::new();
    let enc = PillarEncoder::new(&mut store, "p", &[6, 5], &mut rng);
    let pts: Vec<[f64; 3]> = (0..9)
        .map(|_| [rng.gen_range(0.1..1.9), rng.gen_range(0.1..1.9), rng.gen_range(-1.0..2.0)])
        .collect();
    let a = pillarize(&pts, &grid);
    let x = kept_points_tensor(&pts, &a);
    named(
        "pillar encoder (points)",
        check_input(
            &|g, p| {
                let f = enc.forward(g, &store, p, &a, &grid);
                probe(g, f, 5)
            },
            &x,
        ),
    )
}

pub fn ac2() -> Check {
    let r = losses(21)?.merge(attention(25)?).merge(mvaa_end_to_end(23)?).merge(pillar_encoder(24)?);
    Ok(format!("{} gradient entries, max relative error {:.2e}", r.checked, r.max_rel))
}
