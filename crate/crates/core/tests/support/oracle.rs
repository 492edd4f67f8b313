//! Slow, independent reference implementations.

use man3d::geometry::Box7;
use rand::Rng;

fn corners(b: &Box7) -> Vec<[f64; 2]> {
    let (c, s) = (b.heading.cos(), b.heading.sin());
    let (hl, hw) = (0.5 * b.length, 0.5 * b.width);
    [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]]
        .iter()
        .map(|[x, y]| [b.cx + c * x - s * y, b.cy + s * x + c * y])
        .collect()
}

pub fn polygon_area(p: &[[f64; 2]]) -> f64 {
    let n = p.len();
    let mut a = 0.0;
    for i in 0..n {
        let (u, v) = (p[i], p[(i + 1) % n]);
        a += u[0] * v[1] - v[0] * u[1];
    }
    0.5 * a
}

fn inside(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
}

fn cross_point(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let (d1, d2) = ([q[0] - p[0], q[1] - p[1]], [b[0] - a[0], b[1] - a[1]]);
    let den = d1[0] * d2[1] - d1[1] * d2[0];
    let t = ((a[0] - p[0]) * d2[1] - (a[1] - p[1]) * d2[0]) / den;
    [p[0] + t * d1[0], p[1] + t * d1[1]]
}

/// Sutherland-Hodgman: clip `subject` against the convex counter-clockwise `clip`.
pub fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            match (inside(cur, a, b), inside(prev, a, b)) {
                (true, true) => out.push(cur),
                (true, false) => {
                    out.push(cross_point(prev, cur, a, b));
                    out.push(cur);
                }
                (false, true) => out.push(cross_point(prev, cur, a, b)),
                (false, false) => {}
            }
        }
    }
    out
}

pub fn bev_intersection(a: &Box7, b: &Box7) -> f64 {
    let p = clip_polygon(&corners(a), &corners(b));
    if p.len() < 3 {
        0.0
    } else {
        polygon_area(&p).abs()
    }
}

pub fn iou_bev(a: &Box7, b: &Box7) -> f64 {
    let i = bev_intersection(a, b);
    i / (a.length * a.width + b.length * b.width - i)
}

/// Monte Carlo 3D IoU: sample uniformly inside `a`, count hits in `b`.
pub fn iou_3d_mc(a: &Box7, b: &Box7, samples: usize, rng: &mut impl Rng) -> f64 {
    let mut hits = 0usize;
    for _ in 0..samples {
        let l = [
            (rng.gen::<f64>() - 0.5) * a.length,
            (rng.gen::<f64>() - 0.5) * a.width,
            (rng.gen::<f64>() - 0.5) * a.height,
        ];
        let (c, s) = (a.heading.cos(), a.heading.sin());
        let p = [a.cx + c * l[0] - s * l[1], a.cy + s * l[0] + c * l[1], a.cz + l[2]];
        let (dx, dy) = (p[0] - b.cx, p[1] - b.cy);
        let (cb, sb) = (b.heading.cos(), b.heading.sin());
        let (u, v) = (cb * dx + sb * dy, -sb * dx + cb * dy);
        if u.abs() <= 0.5 * b.length && v.abs() <= 0.5 * b.width && (p[2] - b.cz).abs() <= 0.5 * b.height {
            hits += 1;
        }
    }
    let va = a.length * a.width * a.height;
    let vb = b.length * b.width * b.height;
    let inter = va * hits as f64 / samples as f64;
    inter / (va + vb - inter)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Best total utility over complete one-to-one matchings (size `min(G, N)`).
pub fn best_matching(u: &[Vec<f64>], n: usize) -> f64 {
    let g = u.len();
    let side = g.max(n);
    let get = |r: usize, c: usize| if r < g && c < n { u[r][c] } else { 0.0 };
    permutations(side)
        .iter()
        .map(|p| p.iter().enumerate().map(|(r, &c)| get(r, c)).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Direct scan of every window.
pub fn peaks(scores: &[f64], h: usize, w: usize, k: usize) -> Vec<bool> {
    let r = (k / 2) as isize;
    (0..h * w)
        .map(|idx| {
            let (i, j) = ((idx / w) as isize, (idx % w) as isize);
            for di in -r..=r {
                for dj in -r..=r {
                    let (a, b) = (i + di, j + dj);
                    if a < 0 || b < 0 || a >= h as isize || b >= w as isize {
                        continue;
                    }
                    let o = (a * w as isize + b) as usize;
                    if scores[o] > scores[idx] || (scores[o] == scores[idx] && o < idx) {
                        return false;
                    }
                }
            }
            true
        })
        .collect()
}

/// Key points of `b` (k x k cell centers of its footprint) in world xy.
pub fn key_points(b: &Box7, k: usize) -> Vec<[f64; 2]> {
    let (c, s) = (b.heading.cos(), b.heading.sin());
    let mut out = Vec::new();
    for i in 0..k {
        for j in 0..k {
            let x = ((i as f64 + 0.5) / k as f64 - 0.5) * b.length;
            let y = ((j as f64 + 0.5) / k as f64 - 0.5) * b.width;
            out.push([b.cx + c * x - s * y, b.cy + s * x + c * y]);
        }
    }
    out
}
