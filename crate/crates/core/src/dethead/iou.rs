use crate::error::{Error, Result};
use crate::geometry::{intersection_area, rect_corners};
use crate::pointcloud::Box3D;

fn check_bev(b: &Box3D) -> Result<()> {
    if !(b.l > 0.0 && b.w > 0.0) || ![b.cx, b.cy, b.l, b.w, b.yaw].iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateBox(format!("zero-area or non-finite BEV footprint: {b:?}")));
    }
    Ok(())
}

pub(crate) fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let ra = 0.5 * a.l.hypot(a.w);
    let rb = 0.5 * b.l.hypot(b.w);
    if (a.cx - b.cx).hypot(a.cy - b.cy) > ra + rb {
        return 0.0;
    }
    let pa = rect_corners(a.cx, a.cy, a.l, a.w, a.yaw);
    let pb = rect_corners(b.cx, b.cy, b.l, b.w, b.yaw);
    intersection_area(&pa, &pb)
}

pub(crate) fn bev_iou_unchecked(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    let union = a.l * a.w + b.l * b.w - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// IoU of the rotated bird's-eye-view footprints, by exact polygon clipping.
pub fn rotated_iou_bev(a: &Box3D, b: &Box3D) -> Result<f64> {
    check_bev(a)?;
    check_bev(b)?;
    Ok(bev_iou_unchecked(a, b))
}

/// 3D IoU: BEV intersection times vertical overlap, over the union volume.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let dz = ((a.cz + 0.5 * a.h).min(b.cz + 0.5 * b.h) - (a.cz - 0.5 * a.h).max(b.cz - 0.5 * b.h)).max(0.0);
    let inter = bev_intersection(a, b) * dz;
    Ok((inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0))
}
