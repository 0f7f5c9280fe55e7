use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::iou_3d;
use crate::train::GroundTruth;

use super::merge::Detection;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// 11 (r = 0, 0.1, …, 1) or 40 (r = 1/40, …, 1).
    pub recall_points: usize,
    pub per_class: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { iou_thresholds: vec![0.25, 0.5], recall_points: 11, per_class: true }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("iou thresholds must lie in (0, 1]".into()));
        }
        if self.recall_points != 11 && self.recall_points != 40 {
            return Err(Error::Config(format!("recall_points must be 11 or 40, got {}", self.recall_points)));
        }
        Ok(())
    }
}

/// AP per class at one IoU threshold. Classes without ground truth are
/// `None` and left out of the mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    pub iou_thresh: f64,
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

pub fn recall_grid(points: usize) -> Vec<f64> {
    if points == 11 {
        (0..=10).map(|i| i as f64 / 10.0).collect()
    } else {
        (1..=points).map(|i| i as f64 / points as f64).collect()
    }
}

/// Interpolated AP from a score-sorted TP flag list.
pub fn interpolated_ap(tp: &[bool], n_gt: usize, points: usize) -> f64 {
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / n_gt as f64);
    }
    // suffix maximum of precision
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let grid = recall_grid(points);
    let mut sum = 0.0;
    let mut j = 0;
    for r in &grid {
        while j < rec.len() && rec[j] < *r - 1e-12 {
            j += 1;
        }
        if j < rec.len() {
            sum += prec[j];
        }
    }
    sum / grid.len() as f64
}

/// Greedy TP flags for one class: detections in descending score take the
/// best-overlapping unmatched ground truth of their scene.
fn class_tp(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class: usize, thresh: f64) -> (Vec<bool>, usize) {
    let mut order: Vec<(usize, &Detection)> = Vec::new();
    for (s, ds) in dets.iter().enumerate() {
        order.extend(ds.iter().filter(|d| d.class_id == class).map(|d| (s, d)));
    }
    order.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let n_gt = gts.iter().flatten().filter(|g| g.class_id == class).count();
    let tp = order
        .iter()
        .map(|&(s, d)| {
            let mut best = (thresh, None);
            for (j, gt) in gts[s].iter().enumerate() {
                if gt.class_id != class || used[s][j] {
                    continue;
                }
                let iou = iou_3d(&d.bx, &gt.bx);
                if iou >= best.0 {
                    best = (iou, Some(j));
                }
            }
            match best.1 {
                Some(j) => {
                    used[s][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (tp, n_gt)
}

/// AP over scenes for `num_classes` classes at every configured threshold.
pub fn eval_ap(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], num_classes: usize, cfg: &EvalConfig) -> Result<Vec<ApResult>> {
    cfg.validate()?;
    if dets.len() != gts.len() {
        return Err(Error::Config(format!("{} detection scenes but {} label scenes", dets.len(), gts.len())));
    }
    let mut out = Vec::new();
    for &t in &cfg.iou_thresholds {
        let per_class: Vec<Option<f64>> = (0..num_classes)
            .map(|c| {
                let (tp, n) = class_tp(dets, gts, c, t);
                if n == 0 {
                    log::debug!("class {c} has no ground truth; excluded from mAP");
                    None
                } else {
                    Some(interpolated_ap(&tp, n, cfg.recall_points))
                }
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let map = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        out.push(ApResult { iou_thresh: t, per_class, map });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3d::Box3D;
    use crate::pointops::QueryKind;

    fn gt(cx: f64) -> GroundTruth {
        GroundTruth { bx: Box3D::new(cx, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0).unwrap(), class_id: 0 }
    }

    fn det(cx: f64, score: f64) -> Detection {
        Detection { bx: gt(cx).bx, class_id: 0, cls_prob: score, pred_iou: score, score, source_set: QueryKind::Learnable }
    }

    #[test]
    fn perfect_is_one() {
        let gts = vec![vec![gt(0.0), gt(3.0)]];
        let dets = vec![vec![det(0.0, 0.9), det(3.0, 0.8)]];
        for rp in [11, 40] {
            let r = eval_ap(&dets, &gts, 1, &EvalConfig { recall_points: rp, ..Default::default() }).unwrap();
            assert!(r.iter().all(|a| a.map == 1.0));
        }
    }

    #[test]
    fn half_recall_is_six_elevenths() {
        let r = eval_ap(&[vec![det(0.0, 0.9)]], &[vec![gt(0.0), gt(3.0)]], 1, &EvalConfig::default()).unwrap();
        assert!((r[0].map - 6.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn duplicate_is_false_positive() {
        let gts = vec![vec![gt(0.0), gt(3.0)]];
        let clean = eval_ap(&[vec![det(0.0, 0.9), det(3.0, 0.7)]], &gts, 1, &EvalConfig::default()).unwrap();
        let dup = eval_ap(&[vec![det(0.0, 0.9), det(0.0, 0.8), det(3.0, 0.7)]], &gts, 1, &EvalConfig::default()).unwrap();
        assert!(dup[0].map < clean[0].map);
    }

    #[test]
    fn absent_class_is_excluded() {
        let r = eval_ap(&[vec![det(0.0, 0.9)]], &[vec![gt(0.0)]], 3, &EvalConfig::default()).unwrap();
        assert_eq!(r[0].per_class[1], None);
        assert_eq!(r[0].map, 1.0);
    }

    #[test]
    fn bad_recall_points_rejected() {
        assert!(EvalConfig { recall_points: 12, ..Default::default() }.validate().is_err());
    }
}
