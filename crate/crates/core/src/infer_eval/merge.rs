use serde::{Deserialize, Serialize};

use crate::geom3d::{iou_3d, Box3D};
use crate::pointops::QueryKind;
use crate::Box3;

/// One decoded box with its class, both confidences and the fused score.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bx: Box3,
    pub class_id: usize,
    pub cls_prob: f64,
    pub pred_iou: f64,
    pub score: f64,
    pub source_set: QueryKind,
}

/// Weighted geometric mean `p̂^w · iou^(1−w)`.
pub fn fuse_score(p_hat: f64, pred_iou: f64, w: f64) -> f64 {
    p_hat.powf(w) * pred_iou.powf(1.0 - w)
}

impl Detection {
    pub fn new(bx: Box3, class_id: usize, cls_prob: f64, pred_iou: f64, w: f64, source_set: QueryKind) -> Self {
        let score = fuse_score(cls_prob, pred_iou, w);
        Detection { bx, class_id, cls_prob, pred_iou, score, source_set }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct MergeConfig {
    /// Minimum `iou_3d` with a cluster's seed to join it.
    pub iou_thresh: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig { iou_thresh: 0.5 }
    }
}

/// Lower median (the smaller middle element for even counts).
fn lower_median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

fn median_box(members: &[&Detection]) -> Box3 {
    let m = |f: fn(&Box3) -> f64| lower_median(members.iter().map(|d| f(&d.bx)).collect());
    let s = m(|b| b.yaw.sin());
    let c = m(|b| b.yaw.cos());
    let yaw = if members.len() == 1 { members[0].bx.yaw } else { s.atan2(c) };
    Box3D::new_unchecked(m(|b| b.cx), m(|b| b.cy), m(|b| b.cz), m(|b| b.w), m(|b| b.l), m(|b| b.h), yaw)
}

/// Cross-set duplicate removal. Detections are visited by descending score
/// (ties by input order) and join the first same-class cluster whose seed
/// overlaps them by at least the threshold. Each cluster yields the
/// coordinatewise median box and its best member's confidences.
pub fn merge_boxes(sets: &[Vec<Detection>], cfg: &MergeConfig) -> Vec<Detection> {
    let mut all: Vec<&Detection> = sets.iter().flatten().collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut clusters: Vec<Vec<&Detection>> = Vec::new();
    for d in all {
        let hit = clusters.iter_mut().find(|c| c[0].class_id == d.class_id && iou_3d(&c[0].bx, &d.bx) >= cfg.iou_thresh);
        match hit {
            Some(c) => c.push(d),
            None => clusters.push(vec![d]),
        }
    }
    clusters.iter().map(|c| Detection { bx: median_box(c), ..c[0].clone() }).collect()
}
