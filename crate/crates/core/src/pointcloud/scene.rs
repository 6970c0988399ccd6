//! Deterministic synthetic scenes used as fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Box3D, Point, PointCloud, Range3D};
use crate::error::{Error, Result};

const MAX_PLACEMENT_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub range: Range3D,
    pub num_objects: usize,
    pub num_classes: u32,
    pub length: [f64; 2],
    pub width: [f64; 2],
    pub height: [f64; 2],
    pub points_per_object: usize,
    pub background_points: usize,
    /// Std-dev (meters) of the jitter applied to object points; jittered
    /// points are clamped back inside their box.
    pub noise: f64,
}

impl SceneSpec {
    pub fn small(range: Range3D, num_objects: usize) -> Self {
        Self {
            range,
            num_objects,
            num_classes: 3,
            length: [0.8, 4.5],
            width: [0.6, 2.0],
            height: [1.2, 1.8],
            points_per_object: 64,
            background_points: 500,
            noise: 0.02,
        }
    }

    fn validate(&self) -> Result<()> {
        self.range.validate()?;
        let ok = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !(ok(self.length) && ok(self.width) && ok(self.height)) {
            return Err(Error::Config("object size ranges must be positive and ordered".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be finite and non-negative".into()));
        }
        if self.num_objects > 0 && self.points_per_object == 0 {
            return Err(Error::InfeasibleScene("objects need at least one point each".into()));
        }
        Ok(())
    }
}

/// Samples `n` points inside `b` (uniform in the box frame plus clamped
/// Gaussian jitter). Reflectance is uniform in `[0, 1)`.
pub fn sample_object_points<R: Rng>(b: &Box3D, n: usize, noise: f64, rng: &mut R) -> Vec<Point> {
    let half = [0.5 * b.l, 0.5 * b.w, 0.5 * b.h];
    let limit = half.map(|h| h * (1.0 - 1e-9));
    let jitter = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite std-dev");
    let (s, c) = b.yaw.sin_cos();
    (0..n)
        .map(|_| {
            let mut local = [0.0; 3];
            for k in 0..3 {
                let u = rng.random_range(-half[k]..=half[k]) + if noise > 0.0 { jitter.sample(rng) } else { 0.0 };
                local[k] = u.clamp(-limit[k], limit[k]);
            }
            Point::new(
                b.cx + c * local[0] - s * local[1],
                b.cy + s * local[0] + c * local[1],
                b.cz + local[2],
                rng.random::<f64>(),
            )
        })
        .collect()
}

/// Generates boxes with disjoint BEV bounding circles, then object points
/// (box by box, `points_per_object` each) followed by background points
/// outside every box.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<(PointCloud, Vec<Box3D>)> {
    spec.validate()?;
    let r = spec.range;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let max_radius = 0.5 * spec.length[1].hypot(spec.width[1]);
    if spec.num_objects > 0
        && (2.0 * max_radius >= r.x_max - r.x_min
            || 2.0 * max_radius >= r.y_max - r.y_min
            || spec.height[1] >= r.z_max - r.z_min)
    {
        return Err(Error::InfeasibleScene("largest object does not fit in the range".into()));
    }

    let mut boxes: Vec<Box3D> = Vec::with_capacity(spec.num_objects);
    for _ in 0..spec.num_objects {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let l = rng.random_range(spec.length[0]..=spec.length[1]);
            let w = rng.random_range(spec.width[0]..=spec.width[1]);
            let h = rng.random_range(spec.height[0]..=spec.height[1]);
            let radius = 0.5 * l.hypot(w);
            let margin = radius + 1e-6;
            let cx = rng.random_range(r.x_min + margin..r.x_max - margin);
            let cy = rng.random_range(r.y_min + margin..r.y_max - margin);
            let zlo = r.z_min + 0.5 * h + 1e-6;
            let zhi = r.z_max - 0.5 * h - 1e-6;
            let cz = if zlo < zhi { rng.random_range(zlo..zhi) } else { r.z_center() };
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let class_id = rng.random_range(0..spec.num_classes);
            let clear = boxes.iter().all(|o| {
                let ro = 0.5 * o.l.hypot(o.w);
                (o.cx - cx).hypot(o.cy - cy) > radius + ro
            });
            if clear {
                placed = Some(Box3D::new([cx, cy, cz], [l, w, h], yaw, class_id)?);
                break;
            }
        }
        match placed {
            Some(b) => boxes.push(b),
            None => {
                return Err(Error::InfeasibleScene(format!(
                    "could not place object {} without overlap",
                    boxes.len()
                )))
            }
        }
    }

    let mut points = Vec::with_capacity(spec.num_objects * spec.points_per_object + spec.background_points);
    for b in &boxes {
        points.extend(sample_object_points(b, spec.points_per_object, spec.noise, &mut rng));
    }
    let mut emitted = 0;
    let mut attempts = 0;
    while emitted < spec.background_points {
        attempts += 1;
        if attempts > 100 * spec.background_points + 1000 {
            return Err(Error::InfeasibleScene("no free space for background points".into()));
        }
        let p = Point::new(
            rng.random_range(r.x_min..r.x_max),
            rng.random_range(r.y_min..r.y_max),
            rng.random_range(r.z_min..r.z_max),
            rng.random::<f64>(),
        );
        if boxes.iter().any(|b| b.contains(&p, 0.0)) {
            continue;
        }
        points.push(p);
        emitted += 1;
    }
    let cloud = PointCloud::new(points)?.with_declared_range(r)?;
    Ok((cloud, boxes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn range() -> Range3D {
        Range3D::new((-20.0, 20.0), (-20.0, 20.0), (-2.0, 4.0)).unwrap()
    }

    #[test]
    fn zero_objects_gives_background_only() {
        let (c, b) = generate_scene(&SceneSpec::small(range(), 0), 1).unwrap();
        assert!(b.is_empty());
        assert_eq!(c.len(), 500);
    }

    #[test]
    fn object_points_lie_inside_box_at_origin() {
        let b = Box3D::new([0.0, 0.0, 0.0], [4.0, 2.0, 1.5], 0.7, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = sample_object_points(&b, 100, 0.05, &mut rng);
        assert_eq!(pts.len(), 100);
        assert!(pts.iter().all(|p| b.contains(p, 1e-9)));
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::small(range(), 5);
        assert_eq!(generate_scene(&spec, 9).unwrap(), generate_scene(&spec, 9).unwrap());
    }

    #[test]
    fn every_box_holds_its_points() {
        let spec = SceneSpec::small(range(), 6);
        let (c, boxes) = generate_scene(&spec, 11).unwrap();
        for (k, b) in boxes.iter().enumerate() {
            let chunk = &c.points()[k * spec.points_per_object..(k + 1) * spec.points_per_object];
            assert!(chunk.iter().all(|p| b.contains(p, 1e-9)));
        }
    }

    #[test]
    fn oversized_objects_are_infeasible() {
        let mut spec = SceneSpec::small(Range3D::new((0.0, 2.0), (0.0, 2.0), (0.0, 3.0)).unwrap(), 1);
        spec.length = [3.0, 4.0];
        assert!(matches!(generate_scene(&spec, 0), Err(Error::InfeasibleScene(_))));
    }

    #[test]
    fn crowded_scene_is_infeasible() {
        let mut spec = SceneSpec::small(Range3D::new((0.0, 10.0), (0.0, 10.0), (0.0, 3.0)).unwrap(), 200);
        spec.length = [4.0, 4.5];
        assert!(matches!(generate_scene(&spec, 0), Err(Error::InfeasibleScene(_))));
    }
}
