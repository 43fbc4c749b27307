//! Box decoding from feature maps and average-precision evaluation.
//!
//! Channels 1..6 carry objectness-weighted regression targets, so a cell is
//! decoded by dividing them by channel 0. Fused cells, being convex-style
//! mixtures of such vectors, decode to the weighted mean of the
//! contributors' targets.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureMap;
use crate::world::{WorldObject, SEMANTIC_CHANNELS};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub confidence: f64,
    pub x: f64,
    pub y: f64,
    pub length: f64,
    pub width: f64,
    pub cos_yaw: f64,
    pub sin_yaw: f64,
    /// Source cell `(row, col)`.
    pub cell: (usize, usize),
}

/// Axis-aligned bounding rectangle `(x_min, y_min, x_max, y_max)` of a
/// rotated box.
fn bounding_rect(x: f64, y: f64, length: f64, width: f64, cos: f64, sin: f64) -> (f64, f64, f64, f64) {
    let ex = cos.abs() * length / 2.0 + sin.abs() * width / 2.0;
    let ey = sin.abs() * length / 2.0 + cos.abs() * width / 2.0;
    (x - ex, y - ey, x + ex, y + ey)
}

impl Detection {
    pub fn bounding_rect(&self) -> (f64, f64, f64, f64) {
        bounding_rect(self.x, self.y, self.length, self.width, self.cos_yaw, self.sin_yaw)
    }
}

fn object_rect(o: &WorldObject) -> (f64, f64, f64, f64) {
    let (s, c) = o.yaw.sin_cos();
    bounding_rect(o.x, o.y, o.length, o.width, c, s)
}

pub fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let ix = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let iy = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = ix * iy;
    let union = (a.2 - a.0) * (a.3 - a.1) + (b.2 - b.0) * (b.3 - b.1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Peak cells of channel 0 above `threshold`, decoded into boxes in
/// row-major order.
///
/// A cell is a peak when it is `>=` every 3x3 neighbour and strictly
/// greater than neighbours earlier in row-major order, so a plateau yields
/// exactly one detection. Cells with channel 0 `<= 0` never decode.
pub fn decode(features: &FeatureMap, threshold: f64) -> Result<Vec<Detection>> {
    let shape = features.shape();
    if shape.channels < SEMANTIC_CHANNELS {
        return Err(Error::config(format!(
            "decoder needs at least {SEMANTIC_CHANNELS} channels, got {}",
            shape.channels
        )));
    }
    let (h, w) = (shape.height as isize, shape.width as isize);
    let score = |r: isize, c: isize| features.get(r as usize, c as usize, 0);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = score(r, c);
            if !(v > threshold && v > 0.0) {
                continue;
            }
            let mut peak = true;
            'scan: for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if (dr, dc) == (0, 0) || nr < 0 || nc < 0 || nr >= h || nc >= w {
                        continue;
                    }
                    let n = score(nr, nc);
                    let earlier = (dr, dc) < (0, 0);
                    if n > v || (earlier && n == v) {
                        peak = false;
                        break 'scan;
                    }
                }
            }
            if peak {
                let (row, col) = (r as usize, c as usize);
                out.push(decode_cell(features, row, col));
            }
        }
    }
    Ok(out)
}

fn decode_cell(features: &FeatureMap, row: usize, col: usize) -> Detection {
    let cell = features.cell_at(row, col);
    let o = cell[0];
    let (cx, cy) = features.shape().cell_center(row, col);
    let (mut cos, mut sin) = (cell[5] / o, cell[6] / o);
    let norm = cos.hypot(sin);
    if norm > 0.0 && norm.is_finite() {
        cos /= norm;
        sin /= norm;
    } else {
        cos = 1.0;
        sin = 0.0;
    }
    Detection {
        confidence: o.clamp(0.0, 1.0),
        x: cx + cell[1] / o,
        y: cy + cell[2] / o,
        length: (cell[3] / o).exp(),
        width: (cell[4] / o).exp(),
        cos_yaw: cos,
        sin_yaw: sin,
        cell: (row, col),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub ap50: f64,
    pub ap70: f64,
    /// Over all detections, matched at IoU 0.5.
    pub precision: f64,
    pub recall: f64,
    /// `(detection index, object id)` pairs matched at IoU 0.5.
    pub matches: Vec<(usize, u32)>,
}

/// Greedy matching outcome at one IoU threshold, in ranked order.
fn match_ranked(dets: &[Detection], gt: &[WorldObject], threshold: f64) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let gt_rects: Vec<_> = gt.iter().map(object_rect).collect();
    let mut taken = vec![false; gt.len()];
    let matched = order
        .iter()
        .map(|&d| {
            let rect = dets[d].bounding_rect();
            let best = gt_rects
                .iter()
                .enumerate()
                .filter(|&(g, _)| !taken[g])
                .map(|(g, r)| (g, iou(rect, *r)))
                .filter(|&(_, v)| v >= threshold)
                .fold(None, |best: Option<(usize, f64)>, cur| match best {
                    Some(b) if b.1 >= cur.1 => Some(b),
                    _ => Some(cur),
                });
            best.map(|(g, _)| {
                taken[g] = true;
                g
            })
        })
        .collect();
    (order, matched)
}

/// All-point interpolated area under the precision/recall curve.
fn average_precision(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return if hits.is_empty() { 1.0 } else { 0.0 };
    }
    let mut tp = 0usize;
    let points: Vec<(f64, f64)> = hits
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += hit as usize;
            (tp as f64 / positives as f64, tp as f64 / (i + 1) as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut prev_recall = 0.0;
    // Walk backwards keeping the running max precision, then integrate.
    let mut interp = vec![0.0; points.len()];
    for (i, &(_, p)) in points.iter().enumerate().rev() {
        envelope = envelope.max(p);
        interp[i] = envelope;
    }
    for (&(r, _), p) in points.iter().zip(&interp) {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap.clamp(0.0, 1.0)
}

fn ap_at(dets: &[Detection], gt: &[WorldObject], threshold: f64) -> f64 {
    let (_, matched) = match_ranked(dets, gt, threshold);
    let hits: Vec<bool> = matched.iter().map(Option::is_some).collect();
    average_precision(&hits, gt.len())
}

pub fn evaluate(dets: &[Detection], gt: &[WorldObject]) -> EvalResult {
    let (order, matched) = match_ranked(dets, gt, 0.5);
    let hits: Vec<bool> = matched.iter().map(Option::is_some).collect();
    let tp = hits.iter().filter(|&&h| h).count();
    let matches = order
        .iter()
        .zip(&matched)
        .filter_map(|(&d, g)| g.map(|g| (d, gt[g].id)))
        .collect();
    EvalResult {
        ap50: average_precision(&hits, gt.len()),
        ap70: ap_at(dets, gt, 0.7),
        precision: if dets.is_empty() { 1.0 } else { tp as f64 / dets.len() as f64 },
        recall: if gt.is_empty() { 1.0 } else { tp as f64 / gt.len() as f64 },
        matches,
    }
}

/// One JSON object per line.
pub fn write_jsonl<W: Write>(mut out: W, dets: &[Detection]) -> Result<()> {
    for d in dets {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n").map_err(|e| Error::io("<detections>", e))?;
    }
    Ok(())
}
