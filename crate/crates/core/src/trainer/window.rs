//! Point-concatenation windows over a multi-frame example.

use crate::error::{invalid, Result};
use crate::geometry::Pose;
use crate::scene_sim::{FrameRecord, GtObject};

/// Concatenated points of `W` consecutive frames, expressed in the ego frame
/// of the window's last frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub points: Vec<[f64; 3]>,
    pub pose: Pose,
    /// Index of the window's last frame in the example.
    pub frame_index: usize,
    /// Labels of the last frame.
    pub gt: Vec<GtObject>,
}

/// Windows of `window` frames ending at the last frame and stepping back by
/// `stride` frames, oldest first. `stride == window` gives disjoint windows.
pub fn window_frames(frames: &[FrameRecord], window: usize, stride: usize) -> Result<Vec<Window>> {
    if window == 0 || stride == 0 {
        return invalid("window and stride must be positive");
    }
    if frames.len() < window {
        return invalid(format!("{} frames cannot fill a window of {window}", frames.len()));
    }
    let mut ends = Vec::new();
    let mut end = frames.len() - 1;
    loop {
        ends.push(end);
        if end < window - 1 + stride {
            break;
        }
        end -= stride;
    }
    ends.reverse();
    ends.into_iter()
        .map(|end| {
            let last = &frames[end];
            let mut points = Vec::new();
            for f in &frames[end + 1 - window..=end] {
                if f.ego_pose == last.ego_pose {
                    points.extend_from_slice(&f.points);
                } else {
                    let rel = Pose::relative(&f.ego_pose, &last.ego_pose);
                    points.extend(f.points.iter().map(|&p| rel.apply(p)));
                }
            }
            Ok(Window {
                points,
                pose: last.ego_pose,
                frame_index: end,
                gt: last.gt.clone(),
            })
        })
        .collect()
}
