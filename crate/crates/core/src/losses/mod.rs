//! Training objective with analytic gradients.

mod diou;
mod targets;

pub use diou::{diou_loss, diou_value, DiouLoss};
pub use targets::{draw_gaussian, gaussian_radius, render_gaussian_targets, ObjectTarget, Targets, MIN_OVERLAP, MIN_RADIUS, REG_DIM};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub iou: f64,
    /// shared by the DIoU and L1 regression terms
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls: 1.0, iou: 1.0, reg: 0.25 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.cls, self.iou, self.reg].iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")))
        }
    }
}

/// A scalar loss and its gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 2.0, beta: 4.0 }
    }
}

/// Penalty-reduced focal loss over a heatmap, normalized by the number of
/// cells whose target is exactly 1 (at least 1).
pub fn focal_loss(pred: &[f64], target: &[f64], fp: FocalParams) -> Result<LossValue> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("heatmap sizes differ: {} vs {}", pred.len(), target.len())));
    }
    if let Some(i) = pred.iter().position(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::Input(format!("heatmap prediction {} at {i} not strictly inside (0, 1)", pred[i])));
    }
    if let Some(i) = target.iter().position(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Input(format!("heatmap target {} at {i} outside [0, 1]", target[i])));
    }
    let (a, b) = (fp.alpha, fp.beta);
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    let mut positives = 0usize;
    for (i, (&p, &t)) in pred.iter().zip(target).enumerate() {
        if t == 1.0 {
            positives += 1;
            let q = 1.0 - p;
            value -= q.powf(a) * p.ln();
            grad[i] = a * q.powf(a - 1.0) * p.ln() - q.powf(a) / p;
        } else {
            let wgt = (1.0 - t).powf(b);
            let lq = (1.0 - p).ln();
            value -= wgt * p.powf(a) * lq;
            grad[i] = -wgt * (a * p.powf(a - 1.0) * lq - p.powf(a) / (1.0 - p));
        }
    }
    let n = positives.max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(LossValue { value: value / n, grad })
}

fn check_rows(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    if pred.iter().zip(target).any(|(p, t)| p.len() != t.len()) {
        return Err(Error::Shape("prediction and target rows differ in width".into()));
    }
    Ok(())
}

/// Sum of absolute errors per matched cell, averaged over matches. The
/// gradient at an exact tie is 0.
pub fn reg_l1_loss(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<LossValue> {
    check_rows(pred, target)?;
    if pred.is_empty() {
        return Err(Error::Input("regression loss needs at least one match".into()));
    }
    let m = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len() * pred[0].len());
    for (p, t) in pred.iter().zip(target) {
        for (&pi, &ti) in p.iter().zip(t) {
            let d = pi - ti;
            value += d.abs();
            grad.push(if d > 0.0 { 1.0 / m } else if d < 0.0 { -1.0 / m } else { 0.0 });
        }
    }
    Ok(LossValue { value: value / m, grad })
}

/// Mean L1 between predicted IoU in [-1, 1] and the target 2(I - 0.5).
/// No matches gives 0.
pub fn iou_branch_loss(pred: &[f64], gt_iou: &[f64]) -> Result<LossValue> {
    if pred.len() != gt_iou.len() {
        return Err(Error::Shape(format!("{} IoU predictions for {} targets", pred.len(), gt_iou.len())));
    }
    if pred.iter().any(|p| !(-1.0..=1.0).contains(p)) || gt_iou.iter().any(|i| !(0.0..=1.0).contains(i)) {
        return Err(Error::Input("IoU prediction must lie in [-1, 1] and IoU target in [0, 1]".into()));
    }
    if pred.is_empty() {
        return Ok(LossValue { value: 0.0, grad: Vec::new() });
    }
    let m = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(gt_iou)
        .map(|(&p, &i)| {
            let d = p - 2.0 * (i - 0.5);
            value += d.abs();
            d.signum() * f64::from(d != 0.0) / m
        })
        .collect();
    Ok(LossValue { value: value / m, grad })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub iou: f64,
    pub diou: f64,
    pub reg: f64,
}

/// `w.cls * cls + w.iou * iou + w.reg * (diou + reg)`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    if ![parts.cls, parts.iou, parts.diou, parts.reg].iter().all(|v| v.is_finite()) {
        return Err(Error::Input(format!("non-finite loss part: {parts:?}")));
    }
    Ok(w.cls * parts.cls + w.iou * parts.iou + w.reg * (parts.diou + parts.reg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_vanishes_at_perfect_prediction() {
        let target = [1.0, 0.0, 0.3, 0.0];
        let pred = [1.0 - 1e-9, 1e-9, 1e-9, 1e-9];
        assert!(focal_loss(&pred, &target, FocalParams::default()).unwrap().value < 1e-12);
    }

    #[test]
    fn focal_symmetric_cells_contribute_equally() {
        let target = [0.5, 1.0, 0.5];
        let pred = [0.2, 0.7, 0.2];
        let l = focal_loss(&pred, &target, FocalParams::default()).unwrap();
        assert_eq!(l.grad[0], l.grad[2]);
    }

    #[test]
    fn focal_rejects_bad_inputs() {
        assert!(focal_loss(&[0.5], &[1.0, 0.0], FocalParams::default()).is_err());
        assert!(focal_loss(&[1.0], &[1.0], FocalParams::default()).is_err());
        assert!(focal_loss(&[0.0], &[0.0], FocalParams::default()).is_err());
    }

    #[test]
    fn reg_l1_examples() {
        let t = vec![vec![0.1, 0.2, 0.3]];
        assert_eq!(reg_l1_loss(&t, &t).unwrap().value, 0.0);
        let p = vec![vec![0.6, 0.2, 0.3]];
        let l = reg_l1_loss(&p, &t).unwrap();
        assert!((l.value - 0.5).abs() < 1e-15);
        assert_eq!(l.grad, vec![1.0, 0.0, 0.0]);
        assert!(reg_l1_loss(&[], &[]).is_err());
    }

    #[test]
    fn iou_branch_examples() {
        assert_eq!(iou_branch_loss(&[0.0], &[0.5]).unwrap().value, 0.0);
        assert_eq!(iou_branch_loss(&[1.0], &[1.0]).unwrap().value, 0.0);
        assert!((iou_branch_loss(&[0.1], &[0.75]).unwrap().value - 0.4).abs() < 1e-15);
        assert!(iou_branch_loss(&[1.5], &[0.5]).is_err());
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossParts::default(), &w).unwrap(), 0.0);
        let ones = LossParts { cls: 1.0, iou: 1.0, diou: 1.0, reg: 1.0 };
        assert_eq!(total_loss(&ones, &w).unwrap(), 2.5);
        let w0 = LossWeights { reg: 0.0, ..w };
        let other = LossParts { diou: 7.0, reg: 3.0, ..ones };
        assert_eq!(total_loss(&ones, &w0).unwrap(), total_loss(&other, &w0).unwrap());
        assert!(total_loss(&LossParts { cls: f64::NAN, ..ones }, &w).is_err());
    }
}
