//! Property tests for the invariants the pipeline relies on.

use std::f64::consts::PI;

use proptest::prelude::*;

use pillardet::dethead::{nms, nms_indices, rectify_score, rotated_iou_bev, Detection, NmsConfig};
use pillardet::losses::{diou_loss, render_gaussian_targets};
use pillardet::mape::{mape_encode, MapeParams};
use pillardet::pillargrid::{assign_pillars, gather, scatter, AugmentedPoint, GridConfig};
use pillardet::pointcloud::{
    augment_global, crop_to_range, load_cloud, save_cloud, AugmentSpec, Box3D, Point, PointCloud, Range3D,
};
use pillardet::profile::Profile;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn point() -> impl Strategy<Value = Point> {
    (-80.0..80.0f64, -80.0..80.0f64, -6.0..6.0f64, 0.0..1.0f64, 0.0..0.5f64)
        .prop_map(|(x, y, z, r, t)| Point::new(x, y, z, r).with_time(t))
}

fn bev_box() -> impl Strategy<Value = Box3D> {
    (-5.0..5.0f64, -5.0..5.0f64, 0.3..5.0f64, 0.3..3.0f64, -PI..PI, 0u32..3)
        .prop_map(|(x, y, l, w, yaw, c)| Box3D::new([x, y, 0.0], [l, w, 1.5], yaw, c).unwrap())
}

fn small_range() -> Range3D {
    Range3D::new((-10.0, 10.0), (-8.0, 8.0), (-3.0, 3.0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cloud_file_round_trip_is_f32_exact(pts in prop::collection::vec(point(), 0..200)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let cloud = PointCloud::new(pts.clone()).unwrap();
        save_cloud(&path, &cloud).unwrap();
        let back = load_cloud(&path).unwrap();
        prop_assert_eq!(back.len(), pts.len());
        for (a, b) in pts.iter().zip(back.points()) {
            let narrowed = [a.x, a.y, a.z, a.r, a.t].map(|v| v as f32 as f64);
            prop_assert_eq!(narrowed, [b.x, b.y, b.z, b.r, b.t]);
        }
    }

    #[test]
    fn crop_keeps_exactly_the_inside_points(pts in prop::collection::vec(point(), 0..300)) {
        let range = small_range();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let cropped = crop_to_range(&cloud, &range);
        let expected: Vec<Point> = pts
            .into_iter()
            .filter(|p| p.x >= -10.0 && p.x < 10.0 && p.y >= -8.0 && p.y < 8.0 && p.z >= -3.0 && p.z < 3.0)
            .collect();
        prop_assert_eq!(cropped.points(), &expected[..]);
    }

    #[test]
    fn augmentation_keeps_object_points_inside_boxes(seed in any::<u64>(), b in bev_box()) {
        let pts: Vec<Point> = (0..20)
            .map(|k| {
                let f = k as f64 / 20.0 - 0.5;
                let (s, c) = b.yaw.sin_cos();
                let (u, v) = (f * b.l * 0.9, -f * b.w * 0.9);
                Point::new(b.cx + c * u - s * v, b.cy + s * u + c * v, f * b.h * 0.9, 0.5)
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let (c2, b2) = augment_global(&cloud, &[b], &AugmentSpec::training_default(), seed).unwrap();
        prop_assert!(c2.points().iter().all(|p| b2[0].contains(p, 1e-9)));
    }

    #[test]
    fn scatter_then_gather_is_identity(pts in prop::collection::vec(point(), 1..300)) {
        let range = small_range();
        let cfg = GridConfig::new(range, 0.5, 0.4).unwrap();
        let cloud = crop_to_range(&PointCloud::new(pts).unwrap(), &range);
        let pillars = assign_pillars(&cloud, &cfg).unwrap();
        let feats: Vec<Vec<f32>> = pillars.iter().map(|p| vec![p.ix as f32 + 1.0, p.iy as f32, p.len() as f32]).collect();
        let canvas = scatter(&pillars, &feats, 3, &cfg).unwrap();
        prop_assert_eq!(gather(&canvas, &pillars), feats);
        let occupied = (0..cfg.ny()).flat_map(|y| (0..cfg.nx()).map(move |x| (x, y))).filter(|&(x, y)| canvas.occupied(x, y)).count();
        prop_assert_eq!(occupied, pillars.len());
    }

    #[test]
    fn mape_feature_ignores_point_order(seed in any::<u64>(), n in 1usize..32, d in 1usize..24, rot in 0usize..32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = MapeParams::random_deep(d, 2, &mut rng);
        let aug: Vec<AugmentedPoint> =
            (0..n).map(|i| AugmentedPoint(std::array::from_fn(|k| ((seed as f64 + (i * 11 + k) as f64) * 0.37).sin()))).collect();
        let mut shuffled = aug.clone();
        shuffled.rotate_left(rot % n);
        shuffled.reverse();
        let a = mape_encode(&aug, &params).unwrap().f;
        let b = mape_encode(&shuffled, &params).unwrap().f;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn rectified_score_is_monotone(cls in 0.01..1.0f64, iou in 0.0..1.0f64, dc in 0.0..0.5f64, di in 0.0..0.5f64, alpha in 0.0..=1.0f64) {
        let base = rectify_score(cls, iou, alpha).unwrap();
        let up = rectify_score((cls + dc).min(1.0), (iou + di).min(1.0), alpha).unwrap();
        prop_assert!(up >= base);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn bev_iou_is_symmetric_and_rigid(a in bev_box(), b in bev_box(), tx in -20.0..20.0f64, ty in -20.0..20.0f64, th in -PI..PI) {
        let ab = rotated_iou_bev(&a, &b).unwrap();
        prop_assert!((ab - rotated_iou_bev(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&ab));
        let (s, c) = th.sin_cos();
        let mv = |q: &Box3D| {
            Box3D::new([c * q.cx - s * q.cy + tx, s * q.cx + c * q.cy + ty, q.cz], [q.l, q.w, q.h], q.yaw + th, q.class_id).unwrap()
        };
        prop_assert!((ab - rotated_iou_bev(&mv(&a), &mv(&b)).unwrap()).abs() < 1e-9);
        prop_assert!((rotated_iou_bev(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nms_output_is_a_subset_without_overlaps(boxes in prop::collection::vec(bev_box(), 0..20), scores in prop::collection::vec(0.05..1.0f64, 20), t in 0.05..0.9f64) {
        let dets: Vec<Detection> = boxes
            .into_iter()
            .zip(scores)
            .map(|(b, s)| Detection { bbox: b, cls_score: s, iou_score: 1.0, final_score: s })
            .collect();
        let cfg = NmsConfig::ClassAgnostic(t);
        let kept = nms_indices(&dets, &cfg).unwrap();
        let mut sorted = kept.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), kept.len());
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                prop_assert!(rotated_iou_bev(&dets[a].bbox, &dets[b].bbox).unwrap() <= t);
            }
        }
        // the best detection always survives
        if let Some(best) = dets.iter().map(|d| d.final_score).reduce(f64::max) {
            prop_assert_eq!(dets[kept[0]].final_score, best);
        }
        prop_assert_eq!(nms(&dets, &cfg).unwrap().len(), kept.len());
    }

    #[test]
    fn diou_loss_is_bounded_and_zero_on_match(a in bev_box(), b in bev_box()) {
        let l = diou_loss(&a, &b).unwrap().value;
        prop_assert!((0.0..=2.0).contains(&l));
        prop_assert!(diou_loss(&a, &a).unwrap().value.abs() < 1e-12);
    }
}

#[test]
fn gaussian_targets_peak_at_object_cells() {
    let p = Profile::desk();
    let geom = p.model.head_geometry();
    let boxes = vec![
        Box3D::new([-5.0, 3.0, 0.0], [4.0, 2.0, 1.5], 0.4, 0).unwrap(),
        Box3D::new([6.0, -4.0, 0.0], [0.8, 0.6, 1.7], -1.0, 2).unwrap(),
    ];
    let t = render_gaussian_targets(&boxes, &geom, 3, p.model.head_hw()).unwrap();
    for o in &t.objects {
        assert_eq!(t.heat(o.bbox.class_id as usize, o.row, o.col), 1.0);
    }
    let ones = t.heatmap.iter().filter(|v| **v == 1.0).count();
    assert_eq!(ones, boxes.len());
    assert!(t.heatmap.iter().all(|v| (0.0..=1.0).contains(v)));
}
