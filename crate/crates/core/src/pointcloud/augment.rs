//! Global scene augmentation applied consistently to points and boxes.
//!
//! Order is fixed: flip, rotation about z, translation, global scale.

use std::f64::consts::FRAC_PI_4;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize_angle, Box3D, Point, PointCloud};
use crate::error::{Error, Result};

pub const MAX_ROTATION: f64 = FRAC_PI_4;
pub const MAX_TRANSLATION: f64 = 0.5;
pub const SCALE_BOUNDS: [f64; 2] = [0.95, 1.05];

/// Sampling ranges for [`augment_global`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    /// Probability of mirroring about the X axis (y -> -y).
    pub flip_x_prob: f64,
    /// Probability of mirroring about the Y axis (x -> -x).
    pub flip_y_prob: f64,
    pub rotation: [f64; 2],
    pub translation: [[f64; 2]; 3],
    pub scale: [f64; 2],
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            flip_x_prob: 0.0,
            flip_y_prob: 0.0,
            rotation: [0.0, 0.0],
            translation: [[0.0, 0.0]; 3],
            scale: [1.0, 1.0],
        }
    }

    /// The training recipe: random flips, rotation in [-pi/4, pi/4],
    /// translation in [-0.5, 0.5] m, scale in [0.95, 1.05].
    pub fn training_default() -> Self {
        Self {
            flip_x_prob: 0.5,
            flip_y_prob: 0.5,
            rotation: [-MAX_ROTATION, MAX_ROTATION],
            translation: [[-MAX_TRANSLATION, MAX_TRANSLATION]; 3],
            scale: SCALE_BOUNDS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        const SLACK: f64 = 1e-12;
        let within = |r: [f64; 2], lo: f64, hi: f64| {
            r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && r[0] >= lo - SLACK && r[1] <= hi + SLACK
        };
        for (name, p) in [("flip_x_prob", self.flip_x_prob), ("flip_y_prob", self.flip_y_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !within(self.rotation, -MAX_ROTATION, MAX_ROTATION) {
            return Err(Error::Config(format!(
                "rotation range {:?} must lie within [-pi/4, pi/4]",
                self.rotation
            )));
        }
        for (axis, r) in self.translation.iter().enumerate() {
            if !within(*r, -MAX_TRANSLATION, MAX_TRANSLATION) {
                return Err(Error::Config(format!(
                    "translation range {r:?} on axis {axis} must lie within [-0.5, 0.5]"
                )));
            }
        }
        if !within(self.scale, SCALE_BOUNDS[0], SCALE_BOUNDS[1]) {
            return Err(Error::Config(format!(
                "scale range {:?} must lie within [0.95, 1.05]",
                self.scale
            )));
        }
        Ok(())
    }

    /// Draws one concrete transform. Deterministic for a given seed.
    pub fn sample(&self, seed: u64) -> Result<GlobalTransform> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip_x = rng.random::<f64>() < self.flip_x_prob;
        let flip_y = rng.random::<f64>() < self.flip_y_prob;
        let rotation = rng.random_range(self.rotation[0]..=self.rotation[1]);
        let translation = self.translation.map(|r| rng.random_range(r[0]..=r[1]));
        let scale = rng.random_range(self.scale[0]..=self.scale[1]);
        Ok(GlobalTransform { flip_x, flip_y, rotation, translation, scale })
    }
}

/// A concrete global transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalTransform {
    pub flip_x: bool,
    pub flip_y: bool,
    pub rotation: f64,
    pub translation: [f64; 3],
    pub scale: f64,
}

impl Default for GlobalTransform {
    fn default() -> Self {
        Self { flip_x: false, flip_y: false, rotation: 0.0, translation: [0.0; 3], scale: 1.0 }
    }
}

impl GlobalTransform {
    fn map_xyz(&self, mut x: f64, mut y: f64, mut z: f64) -> (f64, f64, f64) {
        if self.flip_x {
            y = -y;
        }
        if self.flip_y {
            x = -x;
        }
        if self.rotation != 0.0 {
            let (s, c) = self.rotation.sin_cos();
            (x, y) = (c * x - s * y, s * x + c * y);
        }
        x += self.translation[0];
        y += self.translation[1];
        z += self.translation[2];
        (x * self.scale, y * self.scale, z * self.scale)
    }

    pub fn apply_point(&self, p: &Point) -> Point {
        let (x, y, z) = self.map_xyz(p.x, p.y, p.z);
        Point { x, y, z, ..*p }
    }

    pub fn apply_box(&self, b: &Box3D) -> Box3D {
        let (cx, cy, cz) = self.map_xyz(b.cx, b.cy, b.cz);
        let mut yaw = b.yaw;
        if self.flip_x {
            yaw = -yaw;
        }
        if self.flip_y {
            yaw = std::f64::consts::PI - yaw;
        }
        yaw += self.rotation;
        Box3D {
            cx,
            cy,
            cz,
            l: b.l * self.scale,
            w: b.w * self.scale,
            h: b.h * self.scale,
            yaw: normalize_angle(yaw),
            class_id: b.class_id,
        }
    }

    /// Applies the transform. The declared range is dropped since the
    /// transformed cloud is no longer guaranteed to respect it.
    pub fn apply(&self, cloud: &PointCloud, boxes: &[Box3D]) -> (PointCloud, Vec<Box3D>) {
        let points = cloud.points().iter().map(|p| self.apply_point(p)).collect();
        let boxes = boxes.iter().map(|b| self.apply_box(b)).collect();
        (PointCloud { points, declared_range: None }, boxes)
    }
}

pub fn augment_global(
    cloud: &PointCloud,
    boxes: &[Box3D],
    spec: &AugmentSpec,
    seed: u64,
) -> Result<(PointCloud, Vec<Box3D>)> {
    let t = spec.sample(seed)?;
    Ok(t.apply(cloud, boxes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_scene() -> (PointCloud, Vec<Box3D>) {
        let pts = (0..50)
            .map(|i| {
                let f = i as f64;
                Point::new((f * 0.37).sin() * 10.0, (f * 0.11).cos() * 7.0, f * 0.01 - 0.2, 0.3)
            })
            .collect();
        let boxes = vec![
            Box3D::new([1.0, 2.0, 0.0], [4.0, 2.0, 1.5], 0.3, 0).unwrap(),
            Box3D::new([-5.0, 3.0, -0.5], [0.8, 0.6, 1.7], -2.0, 1).unwrap(),
        ];
        (PointCloud::new(pts).unwrap(), boxes)
    }

    #[test]
    fn identity_spec_leaves_scene_unchanged() {
        let (c, b) = sample_scene();
        let (c2, b2) = augment_global(&c, &b, &AugmentSpec::identity(), 7).unwrap();
        assert_eq!(c.points(), c2.points());
        assert_eq!(b, b2);
    }

    #[test]
    fn double_flip_is_involution() {
        let (c, b) = sample_scene();
        let t = GlobalTransform { flip_x: true, ..Default::default() };
        let (c1, b1) = t.apply(&c, &b);
        let (c2, b2) = t.apply(&c1, &b1);
        assert_eq!(c.points(), c2.points());
        for (a, z) in b.iter().zip(&b2) {
            assert_eq!(a.cx, z.cx);
            assert_eq!(a.cy, z.cy);
            assert!((a.yaw - z.yaw).abs() < 1e-15);
        }
    }

    #[test]
    fn rotation_then_inverse_restores_points() {
        let (c, b) = sample_scene();
        let fwd = GlobalTransform { rotation: 0.6, ..Default::default() };
        let back = GlobalTransform { rotation: -0.6, ..Default::default() };
        let (c1, b1) = fwd.apply(&c, &b);
        let (c2, b2) = back.apply(&c1, &b1);
        for (p, q) in c.points().iter().zip(c2.points()) {
            assert!((p.x - q.x).abs() < 1e-6 && (p.y - q.y).abs() < 1e-6 && p.z == q.z);
        }
        for (a, z) in b.iter().zip(&b2) {
            assert!((a.yaw - z.yaw).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_range_spec_rejected() {
        let mut s = AugmentSpec::identity();
        s.rotation = [-1.0, 0.0];
        assert!(s.validate().is_err());
        let mut s = AugmentSpec::identity();
        s.scale = [0.9, 1.0];
        assert!(s.validate().is_err());
        let mut s = AugmentSpec::identity();
        s.translation[2] = [0.0, 0.6];
        assert!(s.validate().is_err());
        assert!(AugmentSpec::training_default().validate().is_ok());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let s = AugmentSpec::training_default();
        assert_eq!(s.sample(42).unwrap(), s.sample(42).unwrap());
    }
}
