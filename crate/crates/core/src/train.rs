//! Loss of a head output against rendered targets, with gradients on every
//! head map, and a plain gradient-descent step on those maps.

use serde::Serialize;

use crate::dethead::{iou_3d, HeadGeometry, HeadOutput, HEATMAP_CEIL, HEATMAP_FLOOR};
use crate::error::{Error, Result};
use crate::losses::{diou_loss, focal_loss, iou_branch_loss, reg_l1_loss, total_loss, FocalParams, LossParts, LossWeights, Targets, REG_DIM};
use crate::pointcloud::{normalize_angle, Box3D};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone)]
pub struct HeadLoss {
    pub parts: LossParts,
    pub total: f64,
    /// gradient of `total` with respect to each head map
    pub grad: HeadOutput,
    pub matches: usize,
}

/// (map, channel) of each regression entry: offset, z, size, yaw.
const REG_CHANNELS: [(usize, usize); REG_DIM] = [(0, 0), (0, 1), (1, 0), (2, 0), (2, 1), (2, 2), (3, 0), (3, 1)];

fn to_f64(t: &DenseTensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn reg_at(out: &HeadOutput, row: usize, col: usize) -> [f64; REG_DIM] {
    let at = |t: &DenseTensor, c: usize| t.at(0, c, row, col) as f64;
    [
        at(&out.offset, 0),
        at(&out.offset, 1),
        at(&out.z, 0),
        at(&out.size, 0),
        at(&out.size, 1),
        at(&out.size, 2),
        at(&out.yaw, 0),
        at(&out.yaw, 1),
    ]
}

fn decoded_box(reg: &[f64; REG_DIM], geom: &HeadGeometry, row: usize, col: usize, class_id: u32) -> Box3D {
    let [x0, y0] = geom.cell_center(row, col);
    Box3D {
        cx: x0 + reg[0] * geom.cell_x,
        cy: y0 + reg[1] * geom.cell_y,
        cz: reg[2],
        l: reg[3].exp(),
        w: reg[4].exp(),
        h: reg[5].exp(),
        yaw: normalize_angle(reg[6].atan2(reg[7])),
        class_id,
    }
}

/// Evaluates the weighted loss at the object center cells of `targets`.
///
/// The IoU-branch target is the 3D IoU between the box decoded at each
/// center cell and its ground truth, held constant for the gradient.
pub fn head_loss(out: &HeadOutput, targets: &Targets, geom: &HeadGeometry, weights: &LossWeights) -> Result<HeadLoss> {
    out.validate()?;
    let (h, w) = out.spatial();
    if [h, w] != targets.hw || out.classes() != targets.classes {
        return Err(Error::Shape("head output and targets disagree on classes or size".into()));
    }
    let cls = focal_loss(&to_f64(&out.heatmap), &targets.heatmap, FocalParams::default())?;
    let mut grad = HeadOutput::zeros(out.classes(), h, w);
    for (g, v) in grad.heatmap.data_mut().iter_mut().zip(&cls.grad) {
        *g = (weights.cls * v) as f32;
    }
    let mut parts = LossParts { cls: cls.value, ..LossParts::default() };
    let m = targets.objects.len();
    if m > 0 {
        let preds: Vec<[f64; REG_DIM]> = targets.objects.iter().map(|o| reg_at(out, o.row, o.col)).collect();
        let reg = reg_l1_loss(
            &preds.iter().map(|p| p.to_vec()).collect::<Vec<_>>(),
            &targets.objects.iter().map(|o| o.reg.to_vec()).collect::<Vec<_>>(),
        )?;
        parts.reg = reg.value;

        let mut iou_pred = Vec::with_capacity(m);
        let mut iou_gt = Vec::with_capacity(m);
        for (k, (o, p)) in targets.objects.iter().zip(&preds).enumerate() {
            let pb = decoded_box(p, geom, o.row, o.col, o.bbox.class_id);
            let d = diou_loss(&pb, &o.bbox)?;
            parts.diou += d.value / m as f64;
            iou_pred.push(out.iou.at(0, 0, o.row, o.col) as f64);
            iou_gt.push(iou_3d(&pb, &o.bbox)?);

            // chain (cx, cy, l, w, yaw) back to the raw maps
            let r2 = (p[6] * p[6] + p[7] * p[7]).max(1e-12);
            let s = weights.reg / m as f64;
            let dreg = &reg.grad[k * REG_DIM..(k + 1) * REG_DIM];
            let chain = [
                d.grad[0] * geom.cell_x,
                d.grad[1] * geom.cell_y,
                0.0,
                d.grad[2] * pb.l,
                d.grad[3] * pb.w,
                0.0,
                d.grad[4] * p[7] / r2,
                -d.grad[4] * p[6] / r2,
            ];
            for (j, &(map, ch)) in REG_CHANNELS.iter().enumerate() {
                let t = match map {
                    0 => &mut grad.offset,
                    1 => &mut grad.z,
                    2 => &mut grad.size,
                    _ => &mut grad.yaw,
                };
                let i = t.index(0, ch, o.row, o.col);
                t.data_mut()[i] += (weights.reg * dreg[j] + s * chain[j]) as f32;
            }
        }
        let ib = iou_branch_loss(&iou_pred, &iou_gt)?;
        parts.iou = ib.value;
        for (o, g) in targets.objects.iter().zip(&ib.grad) {
            let i = grad.iou.index(0, 0, o.row, o.col);
            grad.iou.data_mut()[i] += (weights.iou * g) as f32;
        }
    }
    let total = total_loss(&parts, weights)?;
    Ok(HeadLoss { parts, total, grad, matches: m })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport {
    pub before: LossParts,
    pub total_before: f64,
    pub after: LossParts,
    pub total_after: f64,
    pub grad_norm: f64,
    pub matches: usize,
}

fn descend(t: &mut DenseTensor, g: &DenseTensor, lr: f32, lo: f32, hi: f32) {
    for (v, d) in t.data_mut().iter_mut().zip(g.data()) {
        *v = (*v - lr * d).clamp(lo, hi);
    }
}

/// One gradient-descent step applied directly to the head maps, keeping the
/// heatmap inside its clamp band and the IoU map inside [-1, 1].
pub fn train_step(
    out: &HeadOutput,
    targets: &Targets,
    geom: &HeadGeometry,
    weights: &LossWeights,
    lr: f64,
) -> Result<(HeadOutput, StepReport)> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let before = head_loss(out, targets, geom, weights)?;
    let g = &before.grad;
    let grad_norm = [&g.heatmap, &g.offset, &g.z, &g.size, &g.yaw, &g.iou]
        .iter()
        .flat_map(|t| t.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    let mut next = out.clone();
    let lr = lr as f32;
    let free = (f32::NEG_INFINITY, f32::INFINITY);
    descend(&mut next.heatmap, &g.heatmap, lr, HEATMAP_FLOOR, HEATMAP_CEIL);
    descend(&mut next.offset, &g.offset, lr, free.0, free.1);
    descend(&mut next.z, &g.z, lr, free.0, free.1);
    descend(&mut next.size, &g.size, lr, free.0, free.1);
    descend(&mut next.yaw, &g.yaw, lr, free.0, free.1);
    descend(&mut next.iou, &g.iou, lr, -1.0, 1.0);
    let after = head_loss(&next, targets, geom, weights)?;
    let report = StepReport {
        before: before.parts,
        total_before: before.total,
        after: after.parts,
        total_after: after.total,
        grad_norm,
        matches: before.matches,
    };
    Ok((next, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use crate::losses::render_gaussian_targets;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom() -> HeadGeometry {
        HeadGeometry { x_min: 0.0, y_min: 0.0, cell_x: 0.8, cell_y: 0.8 }
    }

    fn fixture(seed: u64) -> (HeadOutput, Targets) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let boxes = vec![
            Box3D::new([3.3, 4.1, 0.2], [4.0, 1.9, 1.5], 0.4, 0).unwrap(),
            Box3D::new([9.0, 2.2, -0.1], [0.9, 0.8, 1.7], -2.0, 1).unwrap(),
        ];
        let t = render_gaussian_targets(&boxes, &geom(), 2, [16, 16]).unwrap();
        let mut out = HeadOutput::zeros(2, 16, 16);
        for v in out.heatmap.data_mut() {
            *v = rng.random_range(0.05..0.95);
        }
        for tensor in [&mut out.offset, &mut out.z, &mut out.size, &mut out.yaw] {
            for v in tensor.data_mut() {
                *v = rng.random_range(-0.45..0.45);
            }
        }
        for v in out.iou.data_mut() {
            *v = rng.random_range(-0.9..0.9);
        }
        (out, t)
    }

    #[test]
    fn step_reduces_loss() {
        let (out, t) = fixture(1);
        let (_, r) = train_step(&out, &t, &geom(), &LossWeights::default(), 1e-3).unwrap();
        assert!(r.total_after < r.total_before, "{r:?}");
        assert_eq!(r.matches, 2);
    }

    #[test]
    fn regression_map_gradients_match_finite_differences() {
        let (out, t) = fixture(2);
        // the IoU-branch target moves with the box but is held constant in the gradient
        let w = LossWeights { iou: 0.0, ..LossWeights::default() };
        let base = head_loss(&out, &t, &geom(), &w).unwrap();
        for o in &t.objects {
            for &(map, ch) in &REG_CHANNELS {
                let pick = |h: &HeadOutput| -> DenseTensor {
                    match map {
                        0 => h.offset.clone(),
                        1 => h.z.clone(),
                        2 => h.size.clone(),
                        _ => h.yaw.clone(),
                    }
                };
                let idx = pick(&out).index(0, ch, o.row, o.col);
                let x0 = pick(&out).data()[idx] as f64;
                let f = |x: &[f64]| {
                    let mut h = out.clone();
                    let t_ = match map {
                        0 => &mut h.offset,
                        1 => &mut h.z,
                        2 => &mut h.size,
                        _ => &mut h.yaw,
                    };
                    t_.data_mut()[idx] = x[0] as f32;
                    head_loss(&h, &t, &geom(), &w).unwrap().total
                };
                let num = central_difference(f, &[x0], 1e-3);
                let ana = pick(&base.grad).data()[idx] as f64;
                // f32 maps limit the attainable agreement
                assert!(relative_error(&[ana], &num) < 1e-2, "map {map} ch {ch}: {ana} vs {num:?}");
            }
        }
    }
}
