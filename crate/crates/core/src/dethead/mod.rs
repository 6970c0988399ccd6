//! Center-based detection head: decoding, score rectification, rotated IoU
//! and NMS.

mod head;
mod iou;
mod nms;

pub use head::{head_forward, HeadParams};
pub use iou::{iou_3d, rotated_iou_bev};
pub use nms::{nms, nms_indices, NmsConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pillargrid::GridConfig;
use crate::pointcloud::{normalize_angle, Box3D};
use crate::tensor::DenseTensor;

/// Heatmap values are kept inside this band so the focal loss stays finite.
pub const HEATMAP_FLOOR: f32 = 1e-4;
pub const HEATMAP_CEIL: f32 = 1.0 - 1e-4;

/// Raw head maps at one resolution. Every tensor has batch 1 and shares (h, w).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub heatmap: DenseTensor,
    pub offset: DenseTensor,
    pub z: DenseTensor,
    /// ln(l), ln(w), ln(h)
    pub size: DenseTensor,
    /// sin(yaw), cos(yaw)
    pub yaw: DenseTensor,
    /// predicted IoU mapped to [-1, 1]
    pub iou: DenseTensor,
}

impl HeadOutput {
    pub fn zeros(classes: usize, h: usize, w: usize) -> Self {
        HeadOutput {
            heatmap: DenseTensor::zeros([1, classes, h, w]),
            offset: DenseTensor::zeros([1, 2, h, w]),
            z: DenseTensor::zeros([1, 1, h, w]),
            size: DenseTensor::zeros([1, 3, h, w]),
            yaw: DenseTensor::zeros([1, 2, h, w]),
            iou: DenseTensor::zeros([1, 1, h, w]),
        }
    }

    pub fn classes(&self) -> usize {
        self.heatmap.channels()
    }

    pub fn spatial(&self) -> (usize, usize) {
        self.heatmap.spatial()
    }

    pub fn validate(&self) -> Result<()> {
        let [n, _, h, w] = self.heatmap.shape();
        if n != 1 {
            return Err(Error::Shape(format!("head output batch must be 1, got {n}")));
        }
        for (name, t, c) in [
            ("offset", &self.offset, 2),
            ("z", &self.z, 1),
            ("size", &self.size, 3),
            ("yaw", &self.yaw, 2),
            ("iou", &self.iou, 1),
        ] {
            if t.shape() != [1, c, h, w] {
                return Err(Error::Shape(format!("{name} map has shape {:?}, expected {:?}", t.shape(), [1, c, h, w])));
            }
        }
        Ok(())
    }
}

/// Maps head cells back to metric BEV coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadGeometry {
    pub x_min: f64,
    pub y_min: f64,
    /// metric size of one head cell along x and y
    pub cell_x: f64,
    pub cell_y: f64,
}

impl HeadGeometry {
    /// Geometry of a head running at `stride` times the pillar size.
    pub fn from_grid(grid: &GridConfig, stride: usize) -> Self {
        HeadGeometry {
            x_min: grid.range.x_min,
            y_min: grid.range.y_min,
            cell_x: grid.pillar_x * stride as f64,
            cell_y: grid.pillar_y * stride as f64,
        }
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [self.x_min + (col as f64 + 0.5) * self.cell_x, self.y_min + (row as f64 + 0.5) * self.cell_y]
    }

    /// Cell holding (x, y) and the residual offset from that cell's center,
    /// in cell units within [-0.5, 0.5).
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize, [f64; 2])> {
        let u = (x - self.x_min) / self.cell_x;
        let v = (y - self.y_min) / self.cell_y;
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let (col, row) = (u.floor(), v.floor());
        Some((row as usize, col as usize, [u - col - 0.5, v - row - 0.5]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    /// the decoded box; its `class_id` is the detection class
    pub bbox: Box3D,
    pub cls_score: f64,
    pub iou_score: f64,
    pub final_score: f64,
}

impl Detection {
    pub fn class_id(&self) -> u32 {
        self.bbox.class_id
    }

    pub fn record(&self) -> DetectionRecord {
        let b = &self.bbox;
        DetectionRecord {
            cx: b.cx,
            cy: b.cy,
            cz: b.cz,
            l: b.l,
            w: b.w,
            h: b.h,
            yaw: b.yaw,
            class: b.class_id,
            cls_score: self.cls_score,
            iou_score: self.iou_score,
            final_score: self.final_score,
        }
    }
}

/// Flat per-detection record used for line-delimited output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub class: u32,
    pub cls_score: f64,
    pub iou_score: f64,
    pub final_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub max_detections: usize,
    /// heatmap peaks must be strictly above this
    pub score_thresh: f64,
    /// keep only 3x3 local maxima
    pub local_max: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { max_detections: 500, score_thresh: 0.1, local_max: true }
    }
}

fn is_local_max(plane: &[f32], h: usize, w: usize, row: usize, col: usize) -> bool {
    let v = plane[row * w + col];
    for r in row.saturating_sub(1)..(row + 2).min(h) {
        for c in col.saturating_sub(1)..(col + 2).min(w) {
            if plane[r * w + c] > v {
                return false;
            }
        }
    }
    true
}

/// Extracts the top-k heatmap peaks and decodes a box at each.
///
/// Peaks are ranked by score descending, then row, column and class
/// ascending. `final_score` is left equal to `cls_score`; see
/// [`rectify_detections`].
pub fn decode(out: &HeadOutput, geom: &HeadGeometry, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    out.validate()?;
    let (h, w) = out.spatial();
    let mut peaks: Vec<(f32, usize, usize, usize)> = Vec::new();
    for c in 0..out.classes() {
        let plane = out.heatmap.plane(0, c);
        for row in 0..h {
            for col in 0..w {
                let v = plane[row * w + col];
                if (v as f64) > cfg.score_thresh && (!cfg.local_max || is_local_max(plane, h, w, row, col)) {
                    peaks.push((v, row, col, c));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    peaks.truncate(cfg.max_detections);

    let mut dets = Vec::with_capacity(peaks.len());
    for (score, row, col, c) in peaks {
        let at = |t: &DenseTensor, ch: usize| t.at(0, ch, row, col) as f64;
        let [x0, y0] = geom.cell_center(row, col);
        let cx = x0 + at(&out.offset, 0) * geom.cell_x;
        let cy = y0 + at(&out.offset, 1) * geom.cell_y;
        let yaw = normalize_angle(at(&out.yaw, 0).atan2(at(&out.yaw, 1)));
        let bbox = Box3D {
            cx,
            cy,
            cz: at(&out.z, 0),
            l: at(&out.size, 0).exp(),
            w: at(&out.size, 1).exp(),
            h: at(&out.size, 2).exp(),
            yaw,
            class_id: c as u32,
        };
        let iou_score = ((at(&out.iou, 0) + 1.0) * 0.5).clamp(0.0, 1.0);
        let cls_score = score as f64;
        dets.push(Detection { bbox, cls_score, iou_score, final_score: cls_score });
    }
    Ok(dets)
}

/// `cls^(1-alpha) * iou^alpha`.
pub fn rectify_score(cls: f64, iou: f64, alpha: f64) -> Result<f64> {
    if !(cls > 0.0 && cls <= 1.0) {
        return Err(Error::Input(format!("classification score {cls} outside (0, 1]")));
    }
    if !(0.0..=1.0).contains(&iou) {
        return Err(Error::Input(format!("IoU score {iou} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Input(format!("rectification exponent {alpha} outside [0, 1]")));
    }
    Ok(cls.powf(1.0 - alpha) * iou.powf(alpha))
}

/// Rectifies `final_score` in place. `alphas` holds one exponent per class,
/// or a single exponent shared by all classes.
pub fn rectify_detections(dets: &mut [Detection], alphas: &[f64]) -> Result<()> {
    for d in dets.iter_mut() {
        let alpha = match alphas {
            [a] => *a,
            _ => *alphas
                .get(d.class_id() as usize)
                .ok_or_else(|| Error::Config(format!("no rectification exponent for class {}", d.class_id())))?,
        };
        d.final_score = rectify_score(d.cls_score, d.iou_score, alpha)?;
    }
    Ok(())
}

/// Writes boxes into an otherwise empty head output so that decoding returns
/// them. Each box sets a single heatmap cell to `peak`; the rest of the
/// heatmap sits at [`HEATMAP_FLOOR`] and the IoU map encodes a perfect IoU.
pub fn render_head_output(
    boxes: &[Box3D],
    geom: &HeadGeometry,
    classes: usize,
    hw: [usize; 2],
    peak: f32,
) -> Result<HeadOutput> {
    let [h, w] = hw;
    let mut out = HeadOutput::zeros(classes, h, w);
    out.heatmap.data_mut().fill(HEATMAP_FLOOR);
    out.iou.data_mut().fill(1.0);
    let mut taken = vec![false; h * w];
    for b in boxes {
        b.validate()?;
        if b.class_id as usize >= classes {
            return Err(Error::Input(format!("class {} not in head with {classes} classes", b.class_id)));
        }
        let (row, col, off) = geom
            .locate(b.cx, b.cy)
            .filter(|&(r, c, _)| r < h && c < w)
            .ok_or_else(|| Error::Input(format!("box center ({}, {}) outside the head map", b.cx, b.cy)))?;
        if std::mem::replace(&mut taken[row * w + col], true) {
            return Err(Error::Input(format!("two boxes share head cell ({row}, {col})")));
        }
        let set = |t: &mut DenseTensor, ch: usize, v: f64| {
            let i = t.index(0, ch, row, col);
            t.data_mut()[i] = v as f32;
        };
        set(&mut out.heatmap, b.class_id as usize, peak as f64);
        set(&mut out.offset, 0, off[0]);
        set(&mut out.offset, 1, off[1]);
        set(&mut out.z, 0, b.cz);
        set(&mut out.size, 0, b.l.ln());
        set(&mut out.size, 1, b.w.ln());
        set(&mut out.size, 2, b.h.ln());
        set(&mut out.yaw, 0, b.yaw.sin());
        set(&mut out.yaw, 1, b.yaw.cos());
    }
    Ok(out)
}
