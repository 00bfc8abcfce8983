//! Boundary-wise matching, F1, average precision and per-class threshold
//! search.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{detection_order, iou, nms, Detection, Interval};
use crate::model::tensor::Tensor;

/// IoU thresholds of the headline mAP average (COCO convention).
pub const MAP_IOU_GRID: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
pub const CONF_GRID: [f64; 19] = [
    0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80,
    0.85, 0.90, 0.95,
];
pub const NMS_IOU_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Ground truth for matching: class and interval only.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub interval: Interval,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    pub per_class: BTreeMap<usize, ClassCounts>,
    /// (detection index, ground-truth index, IoU) per matched pair.
    pub pairs: Vec<(usize, usize, f64)>,
}

impl MatchResult {
    pub fn counts(&self, class_id: usize) -> ClassCounts {
        self.per_class.get(&class_id).cloned().unwrap_or_default()
    }

    pub fn merge(&mut self, other: MatchResult) {
        for (c, counts) in other.per_class {
            let e = self.per_class.entry(c).or_default();
            e.tp += counts.tp;
            e.fp += counts.fp;
            e.fn_ += counts.fn_;
        }
    }
}

/// Greedy one-to-one matching by descending score: each detection takes the
/// unmatched same-class ground truth of highest IoU >= `iou_thresh`, else it
/// is a false positive; leftover ground truths are false negatives.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|a, b| detection_order(&dets[*a], &dets[*b]));
    let mut gt_taken = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for g in gts {
        result.per_class.entry(g.class_id).or_default();
    }
    for di in order {
        let d = &dets[di];
        let counts = result.per_class.entry(d.class_id).or_default();
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_taken[gi] || g.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.interval, &g.interval);
            if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, v)) => {
                gt_taken[gi] = true;
                counts.tp += 1;
                result.pairs.push((di, gi, v));
            }
            None => counts.fp += 1,
        }
    }
    for (gi, taken) in gt_taken.iter().enumerate() {
        if !taken {
            result.per_class.entry(gts[gi].class_id).or_default().fn_ += 1;
        }
    }
    result
}

/// `2tp / (2tp + fp + fn)`; `None` when the class has no detections and no
/// ground truths.
pub fn f1_from_counts(c: &ClassCounts) -> Option<f64> {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        None
    } else {
        Some(2.0 * c.tp as f64 / denom as f64)
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct F1Summary {
    pub per_class: BTreeMap<usize, Option<f64>>,
    /// F1 of the summed counts across classes.
    pub micro: f64,
    /// Mean of the defined per-class scores.
    pub macro_avg: f64,
}

pub fn f1_boundary(m: &MatchResult) -> F1Summary {
    let mut per_class = BTreeMap::new();
    let mut total = ClassCounts::default();
    let mut defined = Vec::new();
    for (c, counts) in &m.per_class {
        let f1 = f1_from_counts(counts);
        if let Some(v) = f1 {
            defined.push(v);
        }
        total.tp += counts.tp;
        total.fp += counts.fp;
        total.fn_ += counts.fn_;
        per_class.insert(*c, f1);
    }
    F1Summary {
        micro: f1_from_counts(&total).unwrap_or(0.0),
        macro_avg: if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        },
        per_class,
    }
}

/// Frame-wise per-class F1 after binarizing probabilities at per-class
/// thresholds.
pub fn f1_framewise(
    probs: &Tensor,
    labels: &Tensor,
    thresholds: &[f64],
) -> Result<BTreeMap<usize, Option<f64>>> {
    if probs.shape() != labels.shape() {
        return Err(Error::Shape {
            expected: format!("{:?}", labels.shape()),
            got: format!("{:?}", probs.shape()),
        });
    }
    let (c, t) = (probs.shape()[0], probs.shape()[1]);
    if thresholds.len() != c {
        return Err(Error::Shape {
            expected: format!("{c} thresholds"),
            got: format!("{}", thresholds.len()),
        });
    }
    let mut out = BTreeMap::new();
    for ci in 0..c {
        let mut counts = ClassCounts::default();
        for ti in 0..t {
            let pred = probs.at2(ci, ti) >= thresholds[ci];
            let pos = labels.at2(ci, ti) == 1.0;
            match (pred, pos) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => {}
            }
        }
        out.insert(ci, f1_from_counts(&counts));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct PrCurve {
    /// (recall, precision) at each distinct score cutoff, descending score.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Average precision of one class at one IoU threshold, integrated as the
/// area under the precision envelope over all distinct score cutoffs.
/// `None` when the class has no ground truths.
pub fn average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    class_id: usize,
    iou_thresh: f64,
) -> Option<PrCurve> {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class_id).collect();
    if gts.is_empty() {
        return None;
    }
    let mut dets: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class_id).collect();
    dets.sort_by(|a, b| detection_order(a, b));

    // greedy matching in score order; prefix at each cutoff equals matching
    // the cutoff's detection subset
    let n_gt = gts.len();
    let mut taken = vec![false; n_gt];
    let mut tp_flags = Vec::with_capacity(dets.len());
    for d in &dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let v = iou(&d.interval, &g.interval);
            if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            tp_flags.push(true);
        } else {
            tp_flags.push(false);
        }
    }

    // PR points at every distinct score (cutoff includes ties)
    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut i = 0usize;
    while i < dets.len() {
        let mut j = i;
        while j < dets.len() && dets[j].score == dets[i].score {
            if tp_flags[j] {
                tp += 1;
            }
            j += 1;
        }
        let n_det = j;
        points.push((tp as f64 / n_gt as f64, tp as f64 / n_det as f64));
        i = j;
    }

    // all-point interpolation: sum (r_i - r_{i-1}) * max precision at
    // recall >= r_i
    let mut ap = 0.0;
    let mut max_prec_from_right = 0.0f64;
    let mut deltas: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for (r, p) in points.iter().rev() {
        max_prec_from_right = max_prec_from_right.max(*p);
        deltas.push((*r, max_prec_from_right));
    }
    deltas.reverse();
    let mut prev_r = 0.0;
    for (r, p_env) in deltas {
        if r > prev_r {
            ap += (r - prev_r) * p_env;
            prev_r = r;
        }
    }
    Some(PrCurve { points, ap })
}

#[derive(Debug, Clone, Serialize)]
pub struct MapSummary {
    pub map: f64,
    pub map50: f64,
    pub map75: f64,
    /// AP per class at IoU 0.5, `None` for classes without ground truths.
    pub ap50_per_class: BTreeMap<usize, Option<f64>>,
    /// Full AP table: one row per IoU threshold of the COCO grid.
    pub ap_tables: Vec<IouApTable>,
}

/// Per-class AP at a single matching IoU threshold.
#[derive(Debug, Clone, Serialize)]
pub struct IouApTable {
    pub iou: f64,
    pub per_class: BTreeMap<usize, Option<f64>>,
}

/// Mean AP over classes, at IoU 0.5 and 0.75 and averaged over the COCO IoU
/// grid. Classes without ground truths are excluded from the means.
pub fn map_summary(dets: &[Detection], gts: &[GroundTruth], n_classes: usize) -> MapSummary {
    let mut ap50_per_class = BTreeMap::new();
    let mut by_iou: Vec<Vec<f64>> = vec![Vec::new(); MAP_IOU_GRID.len()];
    let mut ap_tables: Vec<IouApTable> = MAP_IOU_GRID
        .iter()
        .map(|iou| IouApTable {
            iou: *iou,
            per_class: BTreeMap::new(),
        })
        .collect();
    for c in 0..n_classes {
        for (i, thresh) in MAP_IOU_GRID.iter().enumerate() {
            let ap = average_precision(dets, gts, c, *thresh).map(|v| v.ap);
            if let Some(v) = ap {
                by_iou[i].push(v);
            }
            ap_tables[i].per_class.insert(c, ap);
        }
        ap50_per_class.insert(c, ap_tables[0].per_class[&c]);
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let map50 = mean(&by_iou[0]);
    let map75 = mean(&by_iou[5]);
    let per_iou_means: Vec<f64> = by_iou.iter().map(|v| mean(v)).collect();
    MapSummary {
        map: mean(&per_iou_means),
        map50,
        map75,
        ap50_per_class,
        ap_tables,
    }
}

/// Per-class decoding thresholds chosen by grid search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub confidence: Vec<f64>,
    pub nms_iou: Vec<f64>,
    pub f1: Vec<f64>,
}

impl ThresholdChoice {
    /// Uniform thresholds for all classes.
    pub fn uniform(n_classes: usize, confidence: f64, nms_iou: f64) -> Self {
        Self {
            confidence: vec![confidence; n_classes],
            nms_iou: vec![nms_iou; n_classes],
            f1: vec![0.0; n_classes],
        }
    }
}

/// Detections of one evaluation unit (an act), before any thresholding.
#[derive(Debug, Clone)]
pub struct UnitPredictions {
    pub dets: Vec<Detection>,
    pub gts: Vec<GroundTruth>,
}

/// Exhaustive per-class grid search over confidence and NMS IoU thresholds,
/// maximizing boundary-wise F1 at `match_iou`. Ties prefer the higher
/// confidence threshold, then the lower NMS threshold.
pub fn tune_thresholds(
    units: &[UnitPredictions],
    n_classes: usize,
    match_iou: f64,
) -> Result<ThresholdChoice> {
    if units.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut choice = ThresholdChoice {
        confidence: vec![CONF_GRID[CONF_GRID.len() - 1]; n_classes],
        nms_iou: vec![NMS_IOU_GRID[0]; n_classes],
        f1: vec![0.0; n_classes],
    };
    for class_id in 0..n_classes {
        let mut best = (0.0f64, CONF_GRID[0], NMS_IOU_GRID[0], false);
        for conf in CONF_GRID {
            for nms_iou_t in NMS_IOU_GRID {
                let mut total = ClassCounts::default();
                for unit in units {
                    let kept: Vec<Detection> = unit
                        .dets
                        .iter()
                        .filter(|d| d.class_id == class_id && d.score >= conf)
                        .cloned()
                        .collect();
                    let kept = nms(&kept, nms_iou_t);
                    let gts: Vec<GroundTruth> = unit
                        .gts
                        .iter()
                        .filter(|g| g.class_id == class_id)
                        .cloned()
                        .collect();
                    let m = match_detections(&kept, &gts, match_iou);
                    let c = m.counts(class_id);
                    total.tp += c.tp;
                    total.fp += c.fp;
                    total.fn_ += c.fn_;
                }
                let f1 = f1_from_counts(&total).unwrap_or(0.0);
                let better = f1 > best.0
                    || (f1 == best.0 && conf > best.1)
                    || (f1 == best.0 && conf == best.1 && nms_iou_t < best.2);
                if better || !best.3 {
                    best = (f1, conf, nms_iou_t, true);
                }
            }
        }
        choice.f1[class_id] = best.0;
        choice.confidence[class_id] = best.1;
        choice.nms_iou[class_id] = best.2;
    }
    Ok(choice)
}

/// Evaluation report emitted as JSON.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub n_detections: usize,
    pub n_ground_truths: usize,
    pub match_iou: f64,
    pub boundary_f1: F1Summary,
    pub counts: BTreeMap<usize, ClassCounts>,
    pub map: MapSummary,
    pub thresholds: ThresholdChoice,
}
