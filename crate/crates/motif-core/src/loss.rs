//! Multi-part detection loss for single-scale 1D boundary regression, plus
//! the frame-wise baseline loss.

use serde::{Deserialize, Serialize};

use crate::dataset::TargetTensor;
use crate::error::{Error, Result};
use crate::model::tensor::Tensor;
use crate::num::{bce_with_logit, sigmoid};

pub const FRAME_HOP: usize = 512;
pub const SAMPLE_RATE: u32 = 22050;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub coord: f64,
    pub obj: f64,
    pub noobj: f64,
    pub cls: f64,
    pub n_responsible: usize,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.coord += other.coord;
        self.obj += other.obj;
        self.noobj += other.noobj;
        self.cls += other.cls;
        self.n_responsible += other.n_responsible;
    }

    pub fn scaled(&self, f: f64) -> LossBreakdown {
        LossBreakdown {
            total: self.total * f,
            coord: self.coord * f,
            obj: self.obj * f,
            noobj: self.noobj * f,
            cls: self.cls * f,
            n_responsible: self.n_responsible,
        }
    }
}

fn check_same_shape(pred: &Tensor, target: &TargetTensor) -> Result<()> {
    if pred.shape() != target.values.shape() {
        return Err(Error::Shape {
            expected: format!("{:?}", target.values.shape()),
            got: format!("{:?}", pred.shape()),
        });
    }
    Ok(())
}

/// Compute the multi-part loss over one clip.
///
/// Responsible cells contribute squared coordinate error (center offset
/// through a sigmoid, raw log-width), objectness BCE toward 1, and
/// independent per-class BCE. Non-responsible, non-ignored cells contribute
/// objectness BCE toward 0. Ignored empty cells contribute nothing.
pub fn detection_loss(
    pred: &Tensor,
    target: &TargetTensor,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    check_same_shape(pred, target)?;
    let (n, g, f) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let n_classes = f - 3;
    let mut out = LossBreakdown::default();
    for a in 0..n {
        for gi in 0..g {
            let responsible = target.values.at3(a, gi, 0) == 1.0;
            let obj_logit = pred.at3(a, gi, 0);
            if responsible {
                out.n_responsible += 1;
                let dx = sigmoid(pred.at3(a, gi, 1)) - target.values.at3(a, gi, 1);
                let dw = pred.at3(a, gi, 2) - target.values.at3(a, gi, 2);
                out.coord += dx * dx + dw * dw;
                out.obj += bce_with_logit(obj_logit, 1.0);
                for c in 0..n_classes {
                    out.cls +=
                        bce_with_logit(pred.at3(a, gi, 3 + c), target.values.at3(a, gi, 3 + c));
                }
            } else if !target.ignore_mask.at2(a, gi) {
                out.noobj += bce_with_logit(obj_logit, 0.0);
            }
        }
    }
    out.total =
        weights.lambda_coord * out.coord + out.obj + weights.lambda_noobj * out.noobj + out.cls;
    Ok(out)
}

/// Gradient of `detection_loss` w.r.t. every raw prediction entry.
pub fn detection_loss_grad(
    pred: &Tensor,
    target: &TargetTensor,
    weights: &LossWeights,
) -> Result<Tensor> {
    check_same_shape(pred, target)?;
    let (n, g, f) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let n_classes = f - 3;
    let mut grad = Tensor::zeros(pred.shape());
    for a in 0..n {
        for gi in 0..g {
            let responsible = target.values.at3(a, gi, 0) == 1.0;
            let p = sigmoid(pred.at3(a, gi, 0));
            if responsible {
                let sx = sigmoid(pred.at3(a, gi, 1));
                let dx = sx - target.values.at3(a, gi, 1);
                *grad.at3_mut(a, gi, 1) = weights.lambda_coord * 2.0 * dx * sx * (1.0 - sx);
                let dw = pred.at3(a, gi, 2) - target.values.at3(a, gi, 2);
                *grad.at3_mut(a, gi, 2) = weights.lambda_coord * 2.0 * dw;
                *grad.at3_mut(a, gi, 0) = p - 1.0;
                for c in 0..n_classes {
                    let pc = sigmoid(pred.at3(a, gi, 3 + c));
                    *grad.at3_mut(a, gi, 3 + c) = pc - target.values.at3(a, gi, 3 + c);
                }
            } else if !target.ignore_mask.at2(a, gi) {
                *grad.at3_mut(a, gi, 0) = weights.lambda_noobj * p;
            }
        }
    }
    Ok(grad)
}

/// Mean BCE over all `C x T` frame logits.
pub fn baseline_loss(logits: &Tensor, labels: &Tensor) -> Result<f64> {
    if logits.shape() != labels.shape() {
        return Err(Error::Shape {
            expected: format!("{:?}", labels.shape()),
            got: format!("{:?}", logits.shape()),
        });
    }
    let n = logits.len() as f64;
    let sum: f64 = logits
        .data()
        .iter()
        .zip(labels.data())
        .map(|(z, y)| bce_with_logit(*z, *y))
        .sum();
    Ok(sum / n)
}

pub fn baseline_loss_grad(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if logits.shape() != labels.shape() {
        return Err(Error::Shape {
            expected: format!("{:?}", labels.shape()),
            got: format!("{:?}", logits.shape()),
        });
    }
    let n = logits.len() as f64;
    let mut grad = Tensor::zeros(logits.shape());
    for ((g, z), y) in grad
        .data_mut()
        .iter_mut()
        .zip(logits.data())
        .zip(labels.data())
    {
        *g = (sigmoid(*z) - *y) / n;
    }
    Ok(grad)
}

/// Multi-label frame activity targets: a frame is positive for class `c`
/// when its center time lies inside some instance of that class.
pub fn frame_labels_from_instances(
    instances: &[(usize, crate::geometry::Interval)],
    n_classes: usize,
    n_frames: usize,
) -> Tensor {
    let mut labels = Tensor::zeros(&[n_classes, n_frames]);
    for (class_id, interval) in instances {
        debug_assert!(*class_id < n_classes);
        for t in 0..n_frames {
            let center = (t * FRAME_HOP + FRAME_HOP / 2) as f64 / SAMPLE_RATE as f64;
            if interval.contains(center) {
                *labels.at2_mut(*class_id, t) = 1.0;
            }
        }
    }
    labels
}
