//! Point-cloud data model, binary I/O, range cropping, global augmentation
//! and synthetic scenes.
//!
//! Points are kept in `f64` in memory so geometric transforms compose without
//! drift; the on-disk format stores little-endian `f32`.

mod augment;
mod io;
mod scene;

pub use augment::{augment_global, AugmentSpec, GlobalTransform};
pub use io::{load_boxes, load_cloud, meta_path, save_boxes, save_cloud, CloudMeta, RECORD_BYTES};
pub use scene::{generate_scene, sample_object_points, SceneSpec};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One LiDAR return: position in meters, reflectance and relative timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
    #[serde(default)]
    pub t: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self { x, y, z, r, t: 0.0 }
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.t = t;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && self.r.is_finite()
            && self.t.is_finite()
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.x, self.y, self.z, self.r, self.t]
    }
}

/// Axis-aligned spatial extent. Intervals are half-open: `[min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range3D {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Range3D {
    pub fn new(x: (f64, f64), y: (f64, f64), z: (f64, f64)) -> Result<Self> {
        let range = Self {
            x_min: x.0,
            x_max: x.1,
            y_min: y.0,
            y_max: y.1,
            z_min: z.0,
            z_max: z.1,
        };
        range.validate()?;
        Ok(range)
    }

    pub fn validate(&self) -> Result<()> {
        let axes = [
            ("x", self.x_min, self.x_max),
            ("y", self.y_min, self.y_max),
            ("z", self.z_min, self.z_max),
        ];
        for (name, lo, hi) in axes {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!(
                    "range on {name} must satisfy min < max, got [{lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x_min
            && p.x < self.x_max
            && p.y >= self.y_min
            && p.y < self.y_max
            && p.z >= self.z_min
            && p.z < self.z_max
    }

    pub fn z_center(&self) -> f64 {
        0.5 * (self.z_min + self.z_max)
    }
}

/// Ordered point list with an optional declared spatial range.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point>,
    declared_range: Option<Range3D>,
}

impl PointCloud {
    /// Builds a cloud, rejecting the first point with a non-finite field.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(index) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { points, declared_range: None })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Attaches a declared range. Every point must lie inside it.
    pub fn with_declared_range(mut self, range: Range3D) -> Result<Self> {
        range.validate()?;
        if let Some(index) = self.points.iter().position(|p| !range.contains(p)) {
            return Err(Error::OutOfRange { index });
        }
        self.declared_range = Some(range);
        Ok(self)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn declared_range(&self) -> Option<&Range3D> {
        self.declared_range.as_ref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }
}

/// Keeps exactly the points inside `range` (half-open on every axis), in order.
pub fn crop_to_range(cloud: &PointCloud, range: &Range3D) -> PointCloud {
    let points = cloud.points.iter().copied().filter(|p| range.contains(p)).collect();
    PointCloud { points, declared_range: Some(*range) }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = a - two_pi * ((a + PI) / two_pi).floor();
    if r >= PI {
        r -= two_pi;
    }
    if r < -PI {
        r += two_pi;
    }
    r
}

/// Oriented 3D box: center, size (length along heading, width, height), yaw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub class_id: u32,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class_id: u32) -> Result<Self> {
        let b = Self {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            l: size[0],
            w: size[1],
            h: size[2],
            yaw: normalize_angle(yaw),
            class_id,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateBox("non-finite field".into()));
        }
        if !(self.l > 0.0 && self.w > 0.0 && self.h > 0.0) {
            return Err(Error::DegenerateBox(format!(
                "sizes must be positive, got l={} w={} h={}",
                self.l, self.w, self.h
            )));
        }
        Ok(())
    }

    /// Point membership with an absolute tolerance on every face.
    pub fn contains(&self, p: &Point, tol: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p.x - self.cx;
        let dy = p.y - self.cy;
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= 0.5 * self.l + tol
            && ly.abs() <= 0.5 * self.w + tol
            && (p.z - self.cz).abs() <= 0.5 * self.h + tol
    }

    /// BEV footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.l;
        let hw = 0.5 * self.w;
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(u, v)| {
            [self.cx + c * u - s * v, self.cy + s * u + c * v]
        })
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[(f64, f64, f64)]) -> PointCloud {
        PointCloud::new(points.iter().map(|&(x, y, z)| Point::new(x, y, z, 0.1)).collect()).unwrap()
    }

    #[test]
    fn range_rejects_inverted_axis() {
        assert!(Range3D::new((0.0, 1.0), (1.0, 1.0), (0.0, 1.0)).is_err());
        assert!(Range3D::new((0.0, 1.0), (0.0, 1.0), (2.0, 1.0)).is_err());
    }

    #[test]
    fn crop_keeps_everything_when_inside() {
        let range = Range3D::new((-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)).unwrap();
        let c = cloud(&[(0.0, 0.0, 0.0), (0.5, -0.5, 0.9)]);
        let cropped = crop_to_range(&c, &range);
        assert_eq!(cropped.points(), c.points());
        assert_eq!(cropped.declared_range(), Some(&range));
    }

    #[test]
    fn crop_drops_upper_boundary() {
        let range = Range3D::new((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)).unwrap();
        let c = cloud(&[(1.0, 0.5, 0.5), (0.0, 0.0, 0.0), (0.5, 1.0, 0.5)]);
        let cropped = crop_to_range(&c, &range);
        assert_eq!(cropped.len(), 1);
        assert_eq!(cropped.points()[0].x, 0.0);
    }

    #[test]
    fn non_finite_point_rejected_with_index() {
        let pts = vec![Point::new(0.0, 0.0, 0.0, 0.0), Point::new(f64::NAN, 0.0, 0.0, 0.0)];
        assert!(matches!(PointCloud::new(pts), Err(Error::NonFinite { index: 1 })));
    }

    #[test]
    fn normalize_angle_wraps_into_half_open_interval() {
        assert_eq!(normalize_angle(PI), -PI);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((normalize_angle(-PI - 0.1) - (PI - 0.1)).abs() < 1e-12);
        for k in -20..20 {
            let a = normalize_angle(k as f64 * 0.7);
            assert!((-PI..PI).contains(&a));
        }
    }

    #[test]
    fn box_contains_respects_yaw() {
        let b = Box3D::new([0.0, 0.0, 0.0], [4.0, 1.0, 1.0], PI / 2.0, 0).unwrap();
        assert!(b.contains(&Point::new(0.0, 1.9, 0.0, 0.0), 0.0));
        assert!(!b.contains(&Point::new(1.9, 0.0, 0.0, 0.0), 0.0));
    }

    #[test]
    fn box_rejects_zero_size() {
        assert!(Box3D::new([0.0; 3], [0.0, 1.0, 1.0], 0.0, 0).is_err());
    }
}
