use serde::{Deserialize, Serialize};

use super::iou::bev_iou_unchecked;
use super::Detection;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "iou_threshold")]
pub enum NmsConfig {
    /// Suppression only within a class, with one IoU threshold per class id.
    ClassSpecific(Vec<f64>),
    /// Suppression across all classes with a single IoU threshold.
    ClassAgnostic(f64),
}

impl NmsConfig {
    fn threshold(&self, class_id: u32) -> Result<f64> {
        match self {
            NmsConfig::ClassAgnostic(t) => Ok(*t),
            NmsConfig::ClassSpecific(ts) => ts
                .get(class_id as usize)
                .copied()
                .ok_or_else(|| Error::Config(format!("no NMS threshold for class {class_id}"))),
        }
    }
}

/// Indices of the detections kept by greedy NMS, in the order they were kept.
///
/// Candidates are visited by descending `final_score`, ties broken by input
/// index. A candidate is suppressed when its BEV IoU with an already kept
/// box (of the same class in class-specific mode) exceeds the threshold.
pub fn nms_indices(dets: &[Detection], cfg: &NmsConfig) -> Result<Vec<usize>> {
    let thresholds = dets.iter().map(|d| cfg.threshold(d.bbox.class_id)).collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].final_score.total_cmp(&dets[a].final_score).then(a.cmp(&b)));
    let agnostic = matches!(cfg, NmsConfig::ClassAgnostic(_));

    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            (agnostic || dets[k].bbox.class_id == dets[i].bbox.class_id)
                && bev_iou_unchecked(&dets[k].bbox, &dets[i].bbox) > thresholds[i]
        });
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Greedy rotated-IoU NMS. Class-specific output is grouped by ascending
/// class id, each group in descending score.
pub fn nms(dets: &[Detection], cfg: &NmsConfig) -> Result<Vec<Detection>> {
    let mut kept = nms_indices(dets, cfg)?;
    if matches!(cfg, NmsConfig::ClassSpecific(_)) {
        // stable sort keeps the score order inside each class
        kept.sort_by_key(|&i| dets[i].bbox.class_id);
    }
    Ok(kept.into_iter().map(|i| dets[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::Box3D;

    fn det(cx: f64, score: f64, class_id: u32) -> Detection {
        let bbox = Box3D::new([cx, 0.0, 0.0], [4.0, 2.0, 1.5], 0.0, class_id).unwrap();
        Detection { bbox, cls_score: score, iou_score: 1.0, final_score: score }
    }

    #[test]
    fn single_detection_kept() {
        let d = vec![det(0.0, 0.5, 0)];
        assert_eq!(nms(&d, &NmsConfig::ClassAgnostic(0.5)).unwrap(), d);
    }

    #[test]
    fn identical_boxes_keep_higher_score() {
        let d = vec![det(0.0, 0.4, 0), det(0.0, 0.7, 0)];
        assert_eq!(nms_indices(&d, &NmsConfig::ClassAgnostic(0.5)).unwrap(), vec![1]);
    }

    #[test]
    fn equal_scores_keep_lower_index() {
        let d = vec![det(0.0, 0.5, 0), det(0.0, 0.5, 0)];
        assert_eq!(nms_indices(&d, &NmsConfig::ClassAgnostic(0.5)).unwrap(), vec![0]);
    }

    #[test]
    fn class_specific_ignores_other_classes() {
        let d = vec![det(0.0, 0.9, 0), det(0.0, 0.8, 1)];
        let cfg = NmsConfig::ClassSpecific(vec![0.5, 0.5]);
        assert_eq!(nms_indices(&d, &cfg).unwrap(), vec![0, 1]);
        assert_eq!(nms_indices(&d, &NmsConfig::ClassAgnostic(0.5)).unwrap(), vec![0]);
    }

    #[test]
    fn missing_class_threshold_is_an_error() {
        let d = vec![det(0.0, 0.9, 3)];
        assert!(nms(&d, &NmsConfig::ClassSpecific(vec![0.5])).is_err());
    }
}
