use crate::error::{Error, Result};
use crate::geometry::{intersection_area, rect_corners, Dual, Scalar};
use crate::pointcloud::Box3D;

/// DIoU loss of one box pair and its gradient with respect to the predicted
/// (cx, cy, l, w, yaw).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiouLoss {
    pub value: f64,
    pub grad: [f64; 5],
}

fn bev(b: &Box3D) -> Result<[f64; 5]> {
    let v = [b.cx, b.cy, b.l, b.w, b.yaw];
    if !(b.l > 0.0 && b.w > 0.0) || !v.iter().all(|x| x.is_finite()) {
        return Err(Error::DegenerateBox(format!("zero-area or non-finite BEV footprint: {b:?}")));
    }
    Ok(v)
}

/// 1 - IoU + d^2 / c^2 over BEV footprints, where c is the diagonal of the
/// axis-aligned rectangle enclosing both footprints.
pub fn diou_value<T: Scalar>(p: [T; 5], g: [T; 5]) -> T {
    let pa = rect_corners(p[0], p[1], p[2], p[3], p[4]);
    let pb = rect_corners(g[0], g[1], g[2], g[3], g[4]);
    let inter = intersection_area(&pa, &pb);
    let union = p[2] * p[3] + g[2] * g[3] - inter;
    let iou = inter / union;

    let (mut x0, mut y0, mut x1, mut y1) = (pa[0][0], pa[0][1], pa[0][0], pa[0][1]);
    for c in pa.iter().chain(pb.iter()) {
        x0 = x0.min(c[0]);
        y0 = y0.min(c[1]);
        x1 = x1.max(c[0]);
        y1 = y1.max(c[1]);
    }
    let (dx, dy) = (p[0] - g[0], p[1] - g[1]);
    let (ex, ey) = (x1 - x0, y1 - y0);
    T::cst(1.0) - iou + (dx * dx + dy * dy) / (ex * ex + ey * ey)
}

pub fn diou_loss(pred: &Box3D, gt: &Box3D) -> Result<DiouLoss> {
    let p = bev(pred)?;
    let g = bev(gt)?.map(Dual::<5>::constant);
    let vars: [Dual<5>; 5] = std::array::from_fn(|k| Dual::variable(p[k], k));
    let out = diou_value(vars, g);
    Ok(DiouLoss { value: out.v, grad: out.d })
}
