use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Detector, PreparedScene};
use crate::diff::{Graph, ParamStore};
use crate::error::Result;
use crate::geom3d::Box3D;
use crate::pointops::{Phase, QueryCounts};

use super::merge::{merge_boxes, Detection, MergeConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct InferConfig {
    /// Weight of the class probability in the fused score.
    pub fusion_w: f64,
    pub score_floor: f64,
    /// Stricter floor for one class, as `(class id, floor)`.
    pub class_floor: Option<(usize, f64)>,
    pub merge: MergeConfig,
    /// Query counts at test time; `None` uses the model's training counts
    /// with the random set sized like the learnable one.
    pub counts: Option<QueryCounts>,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig::indoor()
    }
}

impl InferConfig {
    pub fn indoor() -> Self {
        InferConfig { fusion_w: 0.8, score_floor: 0.05, class_floor: None, merge: MergeConfig::default(), counts: None }
    }

    pub fn outdoor() -> Self {
        InferConfig { fusion_w: 0.2, class_floor: Some((0, 0.5)), ..InferConfig::indoor() }
    }

    pub fn test_counts(&self, det: &Detector) -> QueryCounts {
        self.counts.unwrap_or_else(|| {
            let c = det.cfg.decoder.counts;
            QueryCounts { random: c.learnable.max(c.raw), ..c }
        })
    }

    fn floor(&self, class: usize) -> f64 {
        match self.class_floor {
            Some((c, f)) if c == class => f,
            _ => self.score_floor,
        }
    }
}

/// Per-set decoded detections before the score floor and merging.
pub fn detect_sets(det: &Detector, store: &ParamStore, scene: &PreparedScene, cfg: &InferConfig, seed: u64) -> Result<Vec<Vec<Detection>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let counts = cfg.test_counts(det);
    let out = det.forward(&mut g, store, scene, &counts, Phase::Test, &mut rng)?;
    let p = &out.aggregated;
    let nc = det.cfg.num_classes;
    let (probs, centers, extents, sincos, iou) =
        (g.data(p.probs), g.data(p.centers), g.data(p.extents), g.data(p.sincos), g.data(p.iou_prob));
    let mut sets = Vec::with_capacity(out.sets.len());
    for span in &out.sets {
        let mut v = Vec::with_capacity(span.len);
        for q in span.start..span.start + span.len {
            let row = &probs[q * nc..(q + 1) * nc];
            let (class_id, &p_hat) = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).unwrap();
            let c = &centers[q * 3..q * 3 + 3];
            let e = &extents[q * 3..q * 3 + 3];
            let yaw = sincos[q * 2].atan2(sincos[q * 2 + 1]);
            let bx = Box3D::new_unchecked(c[0], c[1], c[2], e[0], e[1], e[2], yaw);
            v.push(Detection::new(bx, class_id, p_hat, iou[q], cfg.fusion_w, span.kind));
        }
        sets.push(v);
    }
    Ok(sets)
}

/// Full inference: 4-set query mixture, score fusion, per-class floor and
/// cross-set merging.
pub fn infer_scene(det: &Detector, store: &ParamStore, scene: &PreparedScene, cfg: &InferConfig, seed: u64) -> Result<Vec<Detection>> {
    let sets: Vec<Vec<Detection>> = detect_sets(det, store, scene, cfg, seed)?
        .into_iter()
        .map(|s| s.into_iter().filter(|d| d.score >= cfg.floor(d.class_id)).collect())
        .collect();
    Ok(merge_boxes(&sets, &cfg.merge))
}
