//! Coordinate math for 1D boundary detection: interval IoU, grid/anchor
//! encoding of ground truth, decoding of raw predictions, and non-maximum
//! suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::sigmoid;

/// A time span `[start, end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        debug_assert!(end > start, "interval end must exceed start");
        Self { start, end }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }

    /// Length of the overlap with `other`, zero when disjoint.
    pub fn intersection(&self, other: &Interval) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    pub fn clamp_to(&self, lo: f64, hi: f64) -> Interval {
        Interval {
            start: self.start.max(lo),
            end: self.end.min(hi),
        }
    }

    pub fn translate(&self, dt: f64) -> Interval {
        Interval {
            start: self.start + dt,
            end: self.end + dt,
        }
    }
}

/// Division of a clip into equal time cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_grids: usize,
    pub clip_len: f64,
}

impl GridSpec {
    pub fn new(n_grids: usize, clip_len: f64) -> Self {
        assert!(n_grids >= 1);
        assert!(clip_len > 0.0);
        Self { n_grids, clip_len }
    }

    pub fn cell_width(&self) -> f64 {
        self.clip_len / self.n_grids as f64
    }

    /// Center of cell `g` in clip seconds.
    pub fn cell_center(&self, g: usize) -> f64 {
        (g as f64 + 0.5) * self.cell_width()
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::new(11, 15.0)
    }
}

/// Predetermined boundary lengths, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    widths: Vec<f64>,
}

impl AnchorSet {
    pub fn new(widths: Vec<f64>) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Domain("anchor set must not be empty".into()));
        }
        for w in &widths {
            if !(*w > 0.0) {
                return Err(Error::Domain(format!("anchor width {w} is not positive")));
            }
        }
        if widths.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Domain(
                "anchor widths must be strictly increasing".into(),
            ));
        }
        Ok(Self { widths })
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn width(&self, idx: usize) -> f64 {
        self.widths[idx]
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    /// IoU of two co-centered intervals of the given widths. Reduces to the
    /// min/max width ratio.
    pub fn width_iou(a: f64, b: f64) -> f64 {
        if a <= 0.0 || b <= 0.0 {
            return 0.0;
        }
        a.min(b) / a.max(b)
    }

    /// Index of the anchor whose co-centered IoU with `width` is maximal.
    /// Ties resolve to the lowest index.
    pub fn best_for_width(&self, width: f64) -> (usize, f64) {
        let mut best = 0;
        let mut best_iou = Self::width_iou(width, self.widths[0]);
        for (i, a) in self.widths.iter().enumerate().skip(1) {
            let iou = Self::width_iou(width, *a);
            if iou > best_iou {
                best = i;
                best_iou = iou;
            }
        }
        (best, best_iou)
    }
}

/// Ground-truth assignment of one instance to an (anchor, grid) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellCode {
    pub anchor_idx: usize,
    pub grid_idx: usize,
    /// Center position within the cell, in [0, 1).
    pub center_offset: f64,
    /// Log-ratio of instance width to the chosen anchor width.
    pub log_width: f64,
    pub class_id: usize,
    /// Co-centered IoU between the instance width and the chosen anchor.
    pub anchor_iou: f64,
}

/// Decoded model output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub interval: Interval,
}

/// `|a∩b| / |a∪b|` for intervals; 0 when disjoint.
pub fn iou(a: &Interval, b: &Interval) -> f64 {
    let inter = a.intersection(b);
    let union = a.len() + b.len() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Encode a ground-truth interval into its responsible (anchor, grid) cell.
pub fn encode_instance(
    inst: &Interval,
    grid: &GridSpec,
    anchors: &AnchorSet,
    class_id: usize,
) -> Result<CellCode> {
    let center = inst.center();
    if !(center >= 0.0 && center < grid.clip_len) {
        return Err(Error::OutOfClip {
            center,
            clip_len: grid.clip_len,
        });
    }
    let cw = grid.cell_width();
    let grid_idx = ((center / cw).floor() as usize).min(grid.n_grids - 1);
    let center_offset = center / cw - grid_idx as f64;
    let (anchor_idx, anchor_iou) = anchors.best_for_width(inst.len());
    let log_width = (inst.len() / anchors.width(anchor_idx)).ln();
    Ok(CellCode {
        anchor_idx,
        grid_idx,
        center_offset,
        log_width,
        class_id,
        anchor_iou,
    })
}

/// Decode one cell of the raw prediction tensor into a detection.
///
/// `class_logits` must hold one logit per class; the detection takes the
/// argmax class, scored as objectness times that class probability.
pub fn decode_cell(
    obj_logit: f64,
    center_logit: f64,
    log_width: f64,
    class_logits: &[f64],
    anchor_idx: usize,
    grid_idx: usize,
    grid: &GridSpec,
    anchors: &AnchorSet,
) -> Detection {
    assert!(anchor_idx < anchors.len());
    assert!(grid_idx < grid.n_grids);
    assert!(!class_logits.is_empty());
    let objectness = sigmoid(obj_logit);
    let offset = sigmoid(center_logit);
    let width = anchors.width(anchor_idx) * log_width.exp();
    let center = (grid_idx as f64 + offset) * grid.cell_width();
    let mut class_id = 0;
    for (c, l) in class_logits.iter().enumerate().skip(1) {
        if *l > class_logits[class_id] {
            class_id = c;
        }
    }
    let score = objectness * sigmoid(class_logits[class_id]);
    Detection {
        class_id,
        score,
        interval: Interval {
            start: center - 0.5 * width,
            end: center + 0.5 * width,
        },
    }
}

/// Total order used to pick the "highest" detection: score descending, then
/// earlier start, then lower class id, then earlier end.
pub fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(
            a.interval
                .start
                .partial_cmp(&b.interval.start)
                .unwrap_or(std::cmp::Ordering::Equal),
        )
        .then(a.class_id.cmp(&b.class_id))
        .then(
            a.interval
                .end
                .partial_cmp(&b.interval.end)
                .unwrap_or(std::cmp::Ordering::Equal),
        )
}

/// Class-wise greedy non-maximum suppression.
///
/// Keeps the highest-scoring remaining detection of each class and discards
/// same-class detections overlapping it with IoU strictly above
/// `iou_thresh`. Output is sorted by `detection_order`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted: Vec<Detection> = dets.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.interval, &d.interval) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}
