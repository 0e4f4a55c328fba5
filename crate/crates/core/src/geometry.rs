//! Boxes, anchors, overlap, box-delta coding, non-maximum suppression and
//! ROI max pooling.
//!
//! Boxes use continuous corner coordinates in image pixels with area
//! `(x2 - x1) * (y2 - y1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Largest magnitude accepted for the log-scale deltas `tw`, `th` before
/// exponentiation.
pub const MAX_LOG_SCALE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        BBox { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.is_valid() && self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    /// Clamps all corners into `[0, width] x [0, height]`. The result may be
    /// degenerate if the box lies outside the image.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Self {
        Detection {
            bbox,
            score,
            embedding: None,
        }
    }
}

/// Intersection over union. Degenerate boxes overlap nothing.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Anchors tiled over a `feat_h x feat_w` grid.
///
/// Each anchor is centered at `((j + 0.5) * stride, (i + 0.5) * stride)` for
/// cell `(i, j)`. For size `s` and ratio `r` (height over width) the anchor
/// has width `s / sqrt(r)` and height `s * sqrt(r)`, so its area is `s²`.
/// Order: cells row-major, then sizes, then ratios.
pub fn generate_anchors(feat_h: usize, feat_w: usize, stride: usize, sizes: &[f64], ratios: &[f64]) -> Vec<BBox> {
    assert!(stride >= 1 && !sizes.is_empty() && !ratios.is_empty());
    let mut anchors = Vec::with_capacity(feat_h * feat_w * sizes.len() * ratios.len());
    for i in 0..feat_h {
        for j in 0..feat_w {
            let cx = (j as f64 + 0.5) * stride as f64;
            let cy = (i as f64 + 0.5) * stride as f64;
            for &s in sizes {
                for &r in ratios {
                    let root = r.sqrt();
                    anchors.push(BBox::from_center(cx, cy, s / root, s * root));
                }
            }
        }
    }
    anchors
}

/// Regression target `(tx, ty, tw, th)` of `gt` relative to `anchor`.
pub fn encode_box(gt: &BBox, anchor: &BBox) -> [f64; 4] {
    let (gx, gy) = gt.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Inverse of [`encode_box`]; `tw` and `th` are clamped to `±MAX_LOG_SCALE`.
pub fn decode_box(deltas: &[f64; 4], anchor: &BBox) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + deltas[0] * aw;
    let cy = ay + deltas[1] * ah;
    let w = aw * deltas[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = ah * deltas[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Indices of `dets` sorted by descending score, ties by ascending index.
pub fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; a box is suppressed when its IoU with an already kept box exceeds
/// `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<usize> {
    let order = score_order(dets.iter().map(|d| d.score));
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && iou(&dets[i].bbox, &dets[j].bbox) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[derive(Debug, Clone)]
pub struct RoiPoolOutput {
    pub output: Tensor,
    /// Flat feature offset of each bin's maximum, `None` for empty bins.
    pub argmax: Vec<Option<usize>>,
}

/// `box` projected onto the feature grid: `[x0, y0, x1, y1)` in cells,
/// rounded outward and clipped. `None` if the box misses the map entirely.
pub fn project_to_grid(bbox: &BBox, stride: usize, feat_h: usize, feat_w: usize) -> Option<[usize; 4]> {
    let s = stride as f64;
    let x0 = (bbox.x1 / s).floor().max(0.0);
    let y0 = (bbox.y1 / s).floor().max(0.0);
    let x1 = (bbox.x2 / s).ceil().min(feat_w as f64);
    let y1 = (bbox.y2 / s).ceil().min(feat_h as f64);
    if !(x1 > x0 && y1 > y0) {
        return None;
    }
    Some([x0 as usize, y0 as usize, x1 as usize, y1 as usize])
}

/// Max-pools the region under `bbox` into an `out_h x out_w` grid per channel.
///
/// Bin `(p, q)` covers rows `y0 + floor(p * h / out_h) .. y0 + ceil((p + 1) * h / out_h)`
/// (likewise for columns), so bins overlap when the region is smaller than
/// the output grid. Ties resolve to the first element in row-major order.
pub fn roi_pool(features: &Tensor, bbox: &BBox, out_h: usize, out_w: usize, stride: usize) -> Result<RoiPoolOutput> {
    let &[c, h, w] = features.dims() else {
        return Err(Error::Shape(format!("roi_pool expects [C,H,W], got {:?}", features.dims())));
    };
    let fmw = (w * stride) as f64;
    let fmh = (h * stride) as f64;
    if !bbox.is_valid() || bbox.x2 <= 0.0 || bbox.y2 <= 0.0 || bbox.x1 >= fmw || bbox.y1 >= fmh {
        return Err(Error::OutOfBounds(format!(
            "box {:?} does not intersect the {h}x{w} feature map (stride {stride})",
            [bbox.x1, bbox.y1, bbox.x2, bbox.y2]
        )));
    }
    let x = features.data();
    let mut out = vec![0.0; c * out_h * out_w];
    let mut argmax = vec![None; c * out_h * out_w];
    let Some([gx0, gy0, gx1, gy1]) = project_to_grid(bbox, stride, h, w) else {
        // Degenerate projection: every bin is empty.
        return Ok(RoiPoolOutput {
            output: Tensor::new(vec![c, out_h, out_w], out)?,
            argmax,
        });
    };
    let rh = gy1 - gy0;
    let rw = gx1 - gx0;
    let rows: Vec<(usize, usize)> = (0..out_h).map(|p| bin_span(p, rh, out_h, gy0)).collect();
    let cols: Vec<(usize, usize)> = (0..out_w).map(|q| bin_span(q, rw, out_w, gx0)).collect();
    for ci in 0..c {
        let plane = ci * h * w;
        for (p, &(r0, r1)) in rows.iter().enumerate() {
            for (q, &(c0, c1)) in cols.iter().enumerate() {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = None;
                for yy in r0..r1 {
                    for xx in c0..c1 {
                        let idx = plane + yy * w + xx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = Some(idx);
                        }
                    }
                }
                let o = (ci * out_h + p) * out_w + q;
                if let Some(idx) = best_idx {
                    out[o] = best;
                    argmax[o] = Some(idx);
                }
            }
        }
    }
    Ok(RoiPoolOutput {
        output: Tensor::new(vec![c, out_h, out_w], out)?,
        argmax,
    })
}

fn bin_span(p: usize, extent: usize, bins: usize, origin: usize) -> (usize, usize) {
    let lo = p * extent / bins;
    let hi = ((p + 1) * extent).div_ceil(bins);
    (origin + lo, origin + hi.max(lo))
}

/// Accumulates the ROI-pooling gradient into `grad_features`.
pub fn roi_pool_backward(argmax: &[Option<usize>], grad_out: &Tensor, grad_features: &mut Tensor) {
    let gf = grad_features.data_mut();
    for (idx, &g) in argmax.iter().zip(grad_out.data()) {
        if let Some(i) = idx {
            gf[*i] += g;
        }
    }
}
