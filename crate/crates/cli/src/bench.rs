//! MaxPoolNMS vs greedy NMS timing.

use std::time::Instant;

use man3d::fsd::{greedy_nms, maxpool_nms};
use man3d::geometry::Box7;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cell spacing (m) of the synthetic prediction map.
const SPACING: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub side: usize,
    pub kernel: usize,
    pub locations: usize,
    pub maxpool_ms: f64,
    pub greedy_ms: f64,
    pub top1_agree: bool,
}

impl BenchRow {
    pub fn ratio(&self) -> f64 {
        self.greedy_ms / self.maxpool_ms.max(1e-9)
    }
}

fn boxes_for(side: usize) -> Vec<Box7> {
    (0..side * side)
        .map(|i| Box7 {
            cx: (i / side) as f64 * SPACING,
            cy: (i % side) as f64 * SPACING,
            cz: 0.85,
            length: 4.7,
            width: 2.1,
            height: 1.7,
            heading: 0.0,
        })
        .collect()
}

/// Smooth random field: sum of a few bumps plus noise.
fn random_scores(side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let bumps: Vec<(f64, f64, f64)> = (0..(side * side / 400).max(1))
        .map(|_| (rng.gen_range(0.0..side as f64), rng.gen_range(0.0..side as f64), rng.gen_range(0.2..1.0)))
        .collect();
    (0..side * side)
        .map(|i| {
            let (x, y) = ((i / side) as f64, (i % side) as f64);
            let near: f64 = bumps
                .iter()
                .filter(|b| (b.0 - x).abs() < 12.0 && (b.1 - y).abs() < 12.0)
                .map(|b| b.2 * (-((b.0 - x).powi(2) + (b.1 - y).powi(2)) / 8.0).exp())
                .sum();
            near + 0.01 * rng.gen::<f64>()
        })
        .collect()
}

/// Map with one Gaussian bump; both methods must keep its center first.
pub fn single_peak_agrees(side: usize, kernel: usize, rng: &mut ChaCha8Rng) -> man3d::Result<bool> {
    let (px, py) = (rng.gen_range(0..side), rng.gen_range(0..side));
    let scores: Vec<f64> = (0..side * side)
        .map(|i| {
            let (x, y) = ((i / side) as f64 - px as f64, (i % side) as f64 - py as f64);
            (-(x * x + y * y) / 20.0).exp()
        })
        .collect();
    let boxes = boxes_for(side);
    let a = maxpool_nms(&scores, side, side, kernel, 1)?;
    let b = greedy_nms(&boxes, &scores, 0.5, 1)?;
    Ok(a[0].index == px * side + py && b == [a[0].index])
}

pub fn run(sides: &[usize], kernels: &[usize], num_out: usize, seed: u64) -> man3d::Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &side in sides {
        let scores = random_scores(side, &mut rng);
        let boxes = boxes_for(side);
        for &kernel in kernels {
            let t = Instant::now();
            let kept = maxpool_nms(&scores, side, side, kernel, num_out)?;
            let maxpool_ms = t.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(kept);
            let t = Instant::now();
            let kept = greedy_nms(&boxes, &scores, 0.5, num_out)?;
            let greedy_ms = t.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(kept);
            rows.push(BenchRow {
                side,
                kernel,
                locations: side * side,
                maxpool_ms,
                greedy_ms,
                top1_agree: single_peak_agrees(side, kernel, &mut rng)?,
            });
        }
    }
    Ok(rows)
}

pub fn table(rows: &[BenchRow]) -> String {
    let mut s = String::from("side  kernel  locations  maxpool_ms  greedy_ms  ratio  top1_agree\n");
    for r in rows {
        s += &format!(
            "{:<5} {:<7} {:<10} {:<11.3} {:<10.3} {:<6.2} {}\n",
            r.side,
            r.kernel,
            r.locations,
            r.maxpool_ms,
            r.greedy_ms,
            r.ratio(),
            r.top1_agree
        );
    }
    s
}
