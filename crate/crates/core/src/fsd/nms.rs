//! Max-pooling based non-maximum suppression on a dense score map, plus a
//! sequential greedy NMS used as a benchmark comparator.

use crate::error::{invalid, Result};
use crate::geometry::{iou_bev, Box7};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsEntry {
    /// Flat index `row * width + col` into the score map.
    pub index: usize,
    pub score: f64,
    /// False for slots filled with the best non-peak locations.
    pub is_peak: bool,
}

/// Sliding-window maximum along rows then columns (windows truncated at the
/// border), i.e. a stride-1 `k x k` max-pool with implicit `-inf` padding.
fn window_max(scores: &[f64], height: usize, width: usize, kernel: usize) -> Vec<f64> {
    let r = kernel / 2;
    let mut rows = vec![f64::NEG_INFINITY; scores.len()];
    for y in 0..height {
        let line = &scores[y * width..(y + 1) * width];
        for x in 0..width {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(width - 1);
            rows[y * width + x] = line[lo..=hi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let mut out = vec![f64::NEG_INFINITY; scores.len()];
    for y in 0..height {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(height - 1);
        for x in 0..width {
            let mut m = f64::NEG_INFINITY;
            for yy in lo..=hi {
                m = m.max(rows[yy * width + x]);
            }
            out[y * width + x] = m;
        }
    }
    out
}

/// True when no earlier (lower flat index) location in the window ties `index`.
fn first_in_window(scores: &[f64], height: usize, width: usize, kernel: usize, index: usize) -> bool {
    let r = kernel / 2;
    let (y, x) = (index / width, index % width);
    let s = scores[index];
    for yy in y.saturating_sub(r)..=(y + r).min(height - 1) {
        for xx in x.saturating_sub(r)..=(x + r).min(width - 1) {
            let q = yy * width + xx;
            if q >= index {
                if yy == y {
                    break;
                }
                continue;
            }
            if scores[q] == s {
                return false;
            }
        }
    }
    true
}

/// Peak mask: a location is a peak iff its score is >= every score in its
/// `k x k` window and strictly greater than every earlier-index tie there.
pub fn peak_mask(scores: &[f64], height: usize, width: usize, kernel: usize) -> Result<Vec<bool>> {
    if kernel % 2 == 0 {
        return invalid("NMS kernel must be odd");
    }
    if kernel > height || kernel > width {
        return invalid(format!("NMS kernel {kernel} larger than {height}x{width} map"));
    }
    if scores.len() != height * width {
        return invalid("score map size mismatch");
    }
    if scores.iter().any(|s| s.is_nan()) {
        return invalid("NaN in score map");
    }
    let m = window_max(scores, height, width, kernel);
    Ok((0..scores.len())
        .map(|i| scores[i] == m[i] && first_in_window(scores, height, width, kernel, i))
        .collect())
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> std::cmp::Ordering + '_ {
    move |a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b))
}

/// Top `num_out` peaks by score; when fewer peaks exist the remaining slots are
/// filled with the highest-scoring non-peak locations (`is_peak == false`).
pub fn maxpool_nms(scores: &[f64], height: usize, width: usize, kernel: usize, num_out: usize) -> Result<Vec<NmsEntry>> {
    let mask = peak_mask(scores, height, width, kernel)?;
    let cmp = by_score_then_index(scores);
    let mut peaks: Vec<usize> = (0..scores.len()).filter(|&i| mask[i]).collect();
    peaks.sort_by(&cmp);
    peaks.truncate(num_out);
    let mut out: Vec<NmsEntry> = peaks
        .iter()
        .map(|&i| NmsEntry {
            index: i,
            score: scores[i],
            is_peak: true,
        })
        .collect();
    if out.len() < num_out {
        let mut rest: Vec<usize> = (0..scores.len()).filter(|&i| !mask[i]).collect();
        rest.sort_by(&cmp);
        out.extend(rest.into_iter().take(num_out - out.len()).map(|i| NmsEntry {
            index: i,
            score: scores[i],
            is_peak: false,
        }));
    }
    Ok(out)
}

/// Classic sequential NMS: repeatedly keep the best remaining box and drop
/// every box whose BEV IoU with a kept box exceeds `iou_threshold`.
pub fn greedy_nms(boxes: &[Box7], scores: &[f64], iou_threshold: f64, max_out: usize) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return invalid("boxes/scores length mismatch");
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(by_score_then_index(scores));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= max_out {
            break;
        }
        let b = &boxes[i];
        let mut suppressed = false;
        for &k in &kept {
            let o = &boxes[k];
            let reach = 0.5 * (b.diagonal() + o.diagonal());
            if (b.cx - o.cx).hypot(b.cy - o.cy) >= reach {
                continue;
            }
            if iou_bev(b, o)? > iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}
