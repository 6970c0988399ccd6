use serde::{Deserialize, Serialize};

use crate::dethead::HeadGeometry;
use crate::error::{Error, Result};
use crate::pointcloud::Box3D;

pub const MIN_OVERLAP: f64 = 0.7;
pub const MIN_RADIUS: usize = 2;

/// Number of regression channels per object: offset x/y, z, ln l/w/h, sin, cos.
pub const REG_DIM: usize = 8;

/// Regression target of one ground-truth object at its center cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTarget {
    pub row: usize,
    pub col: usize,
    pub reg: [f64; REG_DIM],
    pub bbox: Box3D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub classes: usize,
    pub hw: [usize; 2],
    /// (classes, h, w) row-major
    pub heatmap: Vec<f64>,
    pub objects: Vec<ObjectTarget>,
}

impl Targets {
    pub fn heat(&self, class: usize, row: usize, col: usize) -> f64 {
        self.heatmap[(class * self.hw[0] + row) * self.hw[1] + col]
    }
}

/// Largest radius at which a box shifted by it still overlaps the original
/// by `min_overlap`; the smallest root over the three corner cases.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let root = |a: f64, b: f64, c: f64| (b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);

    let r1 = root(1.0, height + width, width * height * (1.0 - min_overlap) / (1.0 + min_overlap));
    let r2 = root(4.0, 2.0 * (height + width), (1.0 - min_overlap) * width * height);
    let a3 = 4.0 * min_overlap;
    let r3 = root(a3, -2.0 * min_overlap * (height + width), (min_overlap - 1.0) * width * height);
    r1.min(r2).min(r3)
}

/// Splats a Gaussian with sigma (2r+1)/6 into `plane`, keeping the elementwise max.
pub fn draw_gaussian(plane: &mut [f64], hw: [usize; 2], row: usize, col: usize, radius: usize) {
    let [h, w] = hw;
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let r = radius as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let (y, x) = (row as isize + dy, col as isize + dx);
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                continue;
            }
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            let cell = &mut plane[y as usize * w + x as usize];
            *cell = cell.max(v);
        }
    }
}

/// Heatmap and regression targets for a set of ground-truth boxes.
///
/// The radius comes from the box footprint in head cells (length along x,
/// width along y, yaw ignored) at overlap 0.7, floored, and never below 2.
pub fn render_gaussian_targets(boxes: &[Box3D], geom: &HeadGeometry, classes: usize, hw: [usize; 2]) -> Result<Targets> {
    let [h, w] = hw;
    let mut heatmap = vec![0.0; classes * h * w];
    let mut objects = Vec::with_capacity(boxes.len());
    for b in boxes {
        b.validate()?;
        let class = b.class_id as usize;
        if class >= classes {
            return Err(Error::Input(format!("class {class} not in a {classes}-class target")));
        }
        let (row, col, off) = geom
            .locate(b.cx, b.cy)
            .filter(|&(r, c, _)| r < h && c < w)
            .ok_or_else(|| Error::Input(format!("box center ({}, {}) outside the target grid", b.cx, b.cy)))?;
        let radius = gaussian_radius(b.w / geom.cell_y, b.l / geom.cell_x, MIN_OVERLAP);
        let radius = (radius.floor() as usize).max(MIN_RADIUS);
        draw_gaussian(&mut heatmap[class * h * w..(class + 1) * h * w], hw, row, col, radius);
        objects.push(ObjectTarget {
            row,
            col,
            reg: [off[0], off[1], b.cz, b.l.ln(), b.w.ln(), b.h.ln(), b.yaw.sin(), b.yaw.cos()],
            bbox: *b,
        });
    }
    Ok(Targets { classes, hw, heatmap, objects })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> HeadGeometry {
        HeadGeometry { x_min: 0.0, y_min: 0.0, cell_x: 0.8, cell_y: 0.8 }
    }

    fn boxed(x: f64, y: f64, class_id: u32) -> Box3D {
        Box3D::new([x, y, 0.0], [4.0, 2.0, 1.5], 0.3, class_id).unwrap()
    }

    fn unit_peaks(t: &Targets) -> usize {
        t.heatmap.iter().filter(|&&v| v == 1.0).count()
    }

    #[test]
    fn one_box_peaks_at_center_cell() {
        let t = render_gaussian_targets(&[boxed(10.1, 6.5, 0)], &geom(), 2, [32, 32]).unwrap();
        let o = &t.objects[0];
        assert_eq!((o.row, o.col), (8, 12));
        assert_eq!(t.heat(0, 8, 12), 1.0);
        assert_eq!(unit_peaks(&t), 1);
        assert!(t.heatmap.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn distant_and_coincident_boxes() {
        let t = render_gaussian_targets(&[boxed(3.0, 3.0, 0), boxed(20.0, 20.0, 0)], &geom(), 1, [32, 32]).unwrap();
        assert_eq!(unit_peaks(&t), 2);
        let t = render_gaussian_targets(&[boxed(3.0, 3.0, 0), boxed(3.0, 3.0, 0)], &geom(), 1, [32, 32]).unwrap();
        assert_eq!(unit_peaks(&t), 1);
        assert_eq!(t.objects.len(), 2);
    }

    #[test]
    fn outside_box_is_rejected() {
        assert!(render_gaussian_targets(&[boxed(-1.0, 3.0, 0)], &geom(), 1, [32, 32]).is_err());
        assert!(render_gaussian_targets(&[boxed(3.0, 30.0, 0)], &geom(), 1, [32, 32]).is_err());
    }

    #[test]
    fn radius_grows_with_size() {
        assert!(gaussian_radius(10.0, 10.0, 0.7) > gaussian_radius(5.0, 5.0, 0.7));
        assert!(gaussian_radius(5.0, 5.0, 0.7) > 0.0);
    }
}
