//! BEV pillarization: point-to-pillar assignment, 11-channel point
//! augmentation, and scattering pillar features to a dense canvas.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{PointCloud, Range3D};
use crate::tensor::DenseTensor;

/// Pillar grid over a range. Pillars span the full z extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub range: Range3D,
    pub pillar_x: f64,
    pub pillar_y: f64,
}

fn cell_count(extent: f64, size: f64) -> usize {
    let n = extent / size;
    let rounded = n.round();
    if (n - rounded).abs() < 1e-9 * rounded.max(1.0) {
        rounded as usize
    } else {
        n.ceil() as usize
    }
}

impl GridConfig {
    pub fn new(range: Range3D, pillar_x: f64, pillar_y: f64) -> Result<Self> {
        let cfg = Self { range, pillar_x, pillar_y };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        if !(self.pillar_x > 0.0 && self.pillar_y > 0.0 && self.pillar_x.is_finite() && self.pillar_y.is_finite()) {
            return Err(Error::Config("pillar sizes must be positive".into()));
        }
        Ok(())
    }

    /// Number of columns, `ceil((x_max - x_min) / pillar_x)`.
    pub fn nx(&self) -> usize {
        cell_count(self.range.x_max - self.range.x_min, self.pillar_x).max(1)
    }

    pub fn ny(&self) -> usize {
        cell_count(self.range.y_max - self.range.y_min, self.pillar_y).max(1)
    }

    /// Cell of an in-range coordinate.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let ix = ((x - self.range.x_min) / self.pillar_x).floor().max(0.0) as usize;
        let iy = ((y - self.range.y_min) / self.pillar_y).floor().max(0.0) as usize;
        (ix.min(self.nx() - 1), iy.min(self.ny() - 1))
    }

    /// Geometric center of a pillar; z is the mid-height of the range.
    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 3] {
        [
            self.range.x_min + (ix as f64 + 0.5) * self.pillar_x,
            self.range.y_min + (iy as f64 + 0.5) * self.pillar_y,
            self.range.z_center(),
        ]
    }
}

/// A non-empty pillar: its cell and the indices of its points in the source cloud.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pillar {
    pub ix: usize,
    pub iy: usize,
    pub point_indices: Vec<usize>,
}

impl Pillar {
    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }
}

/// Point features `[x, y, z, r, t, x_c, y_c, z_c, x_r, y_r, z_r]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedPoint(pub [f64; AUGMENTED_DIM]);

pub const AUGMENTED_DIM: usize = 11;

/// Groups every point into its pillar. Pillars come out sorted by `(iy, ix)`
/// and each keeps its point indices in ascending order. No point is
/// dropped or sampled.
pub fn assign_pillars(cloud: &PointCloud, cfg: &GridConfig) -> Result<Vec<Pillar>> {
    cfg.validate()?;
    let nx = cfg.nx();
    let keyed: Result<Vec<(usize, usize)>> = cloud
        .points()
        .par_iter()
        .enumerate()
        .map(|(index, p)| {
            if !cfg.range.contains(p) {
                return Err(Error::OutOfRange { index });
            }
            let (ix, iy) = cfg.cell_of(p.x, p.y);
            Ok((iy * nx + ix, index))
        })
        .collect();
    let mut keyed = keyed?;
    // (key, index) pairs are unique, so the unstable sort is deterministic.
    keyed.par_sort_unstable();

    let mut pillars: Vec<Pillar> = Vec::new();
    for (key, index) in keyed {
        match pillars.last_mut() {
            Some(last) if last.iy * nx + last.ix == key => last.point_indices.push(index),
            _ => pillars.push(Pillar { ix: key % nx, iy: key / nx, point_indices: vec![index] }),
        }
    }
    Ok(pillars)
}

/// Augments the points of one pillar with offsets from the pillar center
/// and coordinates relative to the range minimum (unnormalized).
pub fn augment_points(cloud: &PointCloud, pillar: &Pillar, cfg: &GridConfig) -> Vec<AugmentedPoint> {
    let [cx, cy, cz] = cfg.cell_center(pillar.ix, pillar.iy);
    let r = &cfg.range;
    pillar
        .point_indices
        .iter()
        .map(|&i| {
            let p = &cloud.points()[i];
            AugmentedPoint([
                p.x,
                p.y,
                p.z,
                p.r,
                p.t,
                p.x - cx,
                p.y - cy,
                p.z - cz,
                p.x - r.x_min,
                p.y - r.y_min,
                p.z - r.z_min,
            ])
        })
        .collect()
}

/// Dense BEV pseudo-image of shape `(1, D, ny, nx)` plus occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct BevCanvas {
    pub features: DenseTensor,
    pub occupancy: Vec<bool>,
}

impl BevCanvas {
    pub fn occupied(&self, ix: usize, iy: usize) -> bool {
        let w = self.features.shape()[3];
        self.occupancy[iy * w + ix]
    }
}

/// Writes each pillar's feature vector to its cell. All other cells stay zero.
pub fn scatter(pillars: &[Pillar], features: &[Vec<f32>], channels: usize, cfg: &GridConfig) -> Result<BevCanvas> {
    if pillars.len() != features.len() {
        return Err(Error::Shape(format!(
            "{} pillars but {} feature vectors",
            pillars.len(),
            features.len()
        )));
    }
    let (nx, ny) = (cfg.nx(), cfg.ny());
    let mut canvas = DenseTensor::zeros([1, channels, ny, nx]);
    let mut occupancy = vec![false; nx * ny];
    let plane = nx * ny;
    let data = canvas.data_mut();
    for (p, f) in pillars.iter().zip(features) {
        if f.len() != channels {
            return Err(Error::Shape(format!("feature of length {} but D = {channels}", f.len())));
        }
        if p.ix >= nx || p.iy >= ny {
            return Err(Error::Shape(format!("pillar ({}, {}) outside {nx}x{ny} grid", p.ix, p.iy)));
        }
        let cell = p.iy * nx + p.ix;
        if occupancy[cell] {
            return Err(Error::DuplicatePillar { ix: p.ix, iy: p.iy });
        }
        occupancy[cell] = true;
        for (c, &v) in f.iter().enumerate() {
            data[c * plane + cell] = v;
        }
    }
    Ok(BevCanvas { features: canvas, occupancy })
}

/// Reads back the feature vector stored at each pillar's cell.
pub fn gather(canvas: &BevCanvas, pillars: &[Pillar]) -> Vec<Vec<f32>> {
    let [_, c, h, w] = canvas.features.shape();
    let data = canvas.features.data();
    pillars
        .iter()
        .map(|p| (0..c).map(|k| data[k * h * w + p.iy * w + p.ix]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::Point;

    fn grid_1_6() -> GridConfig {
        GridConfig::new(Range3D::new((0.0, 1.6), (0.0, 1.6), (-2.0, 4.0)).unwrap(), 0.2, 0.2).unwrap()
    }

    #[test]
    fn grid_dims_use_ceiling() {
        let g = grid_1_6();
        assert_eq!((g.nx(), g.ny()), (8, 8));
        let g = GridConfig::new(Range3D::new((0.0, 1.7), (0.0, 1.6), (0.0, 1.0)).unwrap(), 0.2, 0.2).unwrap();
        assert_eq!(g.nx(), 9);
        let waymo = GridConfig::new(
            Range3D::new((-75.2, 75.2), (-75.2, 75.2), (-2.0, 4.0)).unwrap(),
            0.2,
            0.2,
        )
        .unwrap();
        assert_eq!((waymo.nx(), waymo.ny()), (752, 752));
    }

    #[test]
    fn floor_arithmetic_example() {
        let cloud = PointCloud::new(vec![Point::new(0.5, 0.3, 0.0, 0.0)]).unwrap();
        let pillars = assign_pillars(&cloud, &grid_1_6()).unwrap();
        assert_eq!(pillars, vec![Pillar { ix: 2, iy: 1, point_indices: vec![0] }]);
    }

    #[test]
    fn shared_cell_makes_one_pillar() {
        let cloud =
            PointCloud::new(vec![Point::new(0.51, 0.31, 0.0, 0.0), Point::new(0.55, 0.35, 1.0, 0.0)]).unwrap();
        let pillars = assign_pillars(&cloud, &grid_1_6()).unwrap();
        assert_eq!(pillars.len(), 1);
        assert_eq!(pillars[0].len(), 2);
    }

    #[test]
    fn out_of_range_point_reports_index() {
        let cloud = PointCloud::new(vec![Point::new(0.5, 0.3, 0.0, 0.0), Point::new(1.6, 0.3, 0.0, 0.0)]).unwrap();
        assert!(matches!(assign_pillars(&cloud, &grid_1_6()), Err(Error::OutOfRange { index: 1 })));
    }

    #[test]
    fn pillars_sorted_row_major() {
        let cloud = PointCloud::new(vec![
            Point::new(1.5, 0.1, 0.0, 0.0),
            Point::new(0.1, 1.5, 0.0, 0.0),
            Point::new(0.1, 0.1, 0.0, 0.0),
        ])
        .unwrap();
        let cells: Vec<_> = assign_pillars(&cloud, &grid_1_6()).unwrap().iter().map(|p| (p.iy, p.ix)).collect();
        assert_eq!(cells, vec![(0, 0), (0, 7), (7, 0)]);
    }

    #[test]
    fn center_point_has_zero_offset() {
        let g = grid_1_6();
        let c = g.cell_center(3, 2);
        let cloud = PointCloud::new(vec![Point::new(c[0], c[1], c[2], 0.4)]).unwrap();
        let pillar = Pillar { ix: 3, iy: 2, point_indices: vec![0] };
        let a = augment_points(&cloud, &pillar, &g)[0].0;
        assert_eq!(&a[5..8], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn hand_computed_offsets() {
        // cell [0.8, 1.0) x [0.8, 1.0), center (0.9, 0.9), z center 1.0
        let g = grid_1_6();
        let cloud = PointCloud::new(vec![Point::new(1.0, 1.0, 0.0, 0.0)]).unwrap();
        let pillar = Pillar { ix: 4, iy: 4, point_indices: vec![0] };
        let a = augment_points(&cloud, &pillar, &g)[0].0;
        assert!((a[5] - 0.1).abs() < 1e-12);
        assert!((a[6] - 0.1).abs() < 1e-12);
        assert!((a[7] + 1.0).abs() < 1e-12);
        assert_eq!(a[8], 1.0 - 0.0);
        assert_eq!(a[10], 2.0);
    }

    #[test]
    fn range_minimum_corner_has_zero_relative_coords() {
        let g = grid_1_6();
        let cloud = PointCloud::new(vec![Point::new(0.0, 0.0, -2.0, 0.0)]).unwrap();
        let pillars = assign_pillars(&cloud, &g).unwrap();
        let a = augment_points(&cloud, &pillars[0], &g)[0].0;
        assert_eq!(&a[8..11], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn scatter_empty_is_zero() {
        let canvas = scatter(&[], &[], 4, &grid_1_6()).unwrap();
        assert!(canvas.features.data().iter().all(|&v| v == 0.0));
        assert!(canvas.occupancy.iter().all(|&o| !o));
    }

    #[test]
    fn scatter_single_cell() {
        let p = Pillar { ix: 2, iy: 1, point_indices: vec![0] };
        let canvas = scatter(std::slice::from_ref(&p), &[vec![7.0]], 1, &grid_1_6()).unwrap();
        let nonzero: Vec<_> = canvas.features.data().iter().enumerate().filter(|(_, &v)| v != 0.0).collect();
        assert_eq!(nonzero, vec![(8 + 2, &7.0)]);
        assert!(canvas.occupied(2, 1));
    }

    #[test]
    fn scatter_rejects_duplicates() {
        let p = Pillar { ix: 2, iy: 1, point_indices: vec![0] };
        let err = scatter(&[p.clone(), p], &[vec![1.0], vec![2.0]], 1, &grid_1_6()).unwrap_err();
        assert!(matches!(err, Error::DuplicatePillar { ix: 2, iy: 1 }));
    }
}
