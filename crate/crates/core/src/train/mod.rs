//! Set-prediction training: per-set Hungarian matching, the four loss terms,
//! ground-truth repeating and the AdamW loop.

mod augment;
mod loss;
mod manifest;
mod matching;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Detector, Preds, PreparedScene};
use crate::diff::{adam_step, clip_grad_norm, AdamConfig, AdamState, Graph, ParamStore, Var};
use crate::error::Result;
use crate::pointops::{Phase, PointCloud, QueryKind};

pub use augment::{augment_scene, point_in_box, AugmentConfig, BankObject, ObjectBank, BANK_MAGIC, BANK_MARGIN};
pub use loss::{
    bce, gt_repeat, loss_boxes, loss_cls, loss_iou_branch, match_cost, match_set, matched_iou_de, pred_rows, FocalParams, GroundTruth,
    LossWeights, PredRow, PROB_CLAMP,
};
pub use manifest::{flatten_toml, git_describe, read_manifest, write_manifest};
pub use matching::{hungarian, Assignment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Learning rate is multiplied by `lr_decay` from this epoch on.
    pub lr_drop_epoch: usize,
    pub lr_decay: f64,
    pub weights: LossWeights,
    pub focal: FocalParams,
    pub gt_repeat: usize,
    /// Also supervise every decoder layer, not just the layer average.
    pub aux_loss: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
            clip_norm: 1.0,
            lr_drop_epoch: 24,
            lr_decay: 0.1,
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            gt_repeat: 1,
            aux_loss: true,
            augment: AugmentConfig::default(),
        }
    }
}

/// Loss terms of one query set (averaged over supervised outputs).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SetTerms {
    pub cls: f64,
    pub l1: f64,
    pub iou_de_loss: f64,
    pub iou_branch_bce: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub cls: f64,
    pub l1: f64,
    pub iou_de_loss: f64,
    pub iou_branch_bce: f64,
    pub total: f64,
    pub per_set: Vec<(QueryKind, SetTerms)>,
}

fn slice_preds(g: &mut Graph, p: &Preds, start: usize, len: usize) -> Result<Preds> {
    let mut s = |v: Var| g.slice(v, 0, start, start + len);
    Ok(Preds {
        probs: s(p.probs)?,
        centers: s(p.centers)?,
        extents: s(p.extents)?,
        log_extents: s(p.log_extents)?,
        sincos: s(p.sincos)?,
        iou_prob: s(p.iou_prob)?,
    })
}

/// Builds the training loss of one forward pass; returns the scalar loss
/// and its breakdown.
pub fn build_loss(
    g: &mut Graph,
    det: &Detector,
    out: &crate::decoder::ForwardOut,
    gts: &[GroundTruth],
    cfg: &TrainConfig,
) -> Result<(Var, LossReport)> {
    let targets = gt_repeat(gts, cfg.gt_repeat);
    let grid = det.cfg.grid;
    let w = cfg.weights;
    let mut sources = vec![out.aggregated];
    if cfg.aux_loss {
        sources.extend(out.per_layer.iter().copied());
    }
    let inv = 1.0 / sources.len() as f64;
    let mut report = LossReport { per_set: out.sets.iter().map(|s| (s.kind, SetTerms::default())).collect(), ..Default::default() };
    let mut terms: Vec<Var> = Vec::new();
    for src in &sources {
        for (si, span) in out.sets.iter().enumerate() {
            let p = slice_preds(g, src, span.start, span.len)?;
            let rows = pred_rows(g, &p, &grid);
            let a = match_set(&rows, &targets, &grid, &w);
            let positives: Vec<(usize, usize)> = a.pairs.iter().map(|&(q, gi)| (q, targets[gi].class_id)).collect();
            let iou = if a.pairs.is_empty() { None } else { Some(matched_iou_de(g, &p, &a, &targets)?) };
            let cls = loss_cls(g, p.probs, &positives, iou, &cfg.focal)?;
            let (l1, iou_loss) = match iou {
                Some(v) => loss_boxes(g, &p, &a, &targets, v, &grid)?,
                None => (g.scalar(0.0), g.scalar(0.0)),
            };
            let bce = loss_iou_branch(g, p.iou_prob, &rows, &a, &targets)?;
            let st = &mut report.per_set[si].1;
            st.cls += g.value(cls).item() * inv;
            st.l1 += g.value(l1).item() * inv;
            st.iou_de_loss += g.value(iou_loss).item() * inv;
            st.iou_branch_bce += g.value(bce).item() * inv;
            for (v, wt) in [(cls, w.cls), (l1, w.l1), (iou_loss, w.iou), (bce, w.iou_branch)] {
                if wt != 0.0 {
                    terms.push(g.scale(v, wt * inv));
                }
            }
        }
    }
    for (_, st) in &report.per_set {
        report.cls += st.cls;
        report.l1 += st.l1;
        report.iou_de_loss += st.iou_de_loss;
        report.iou_branch_bce += st.iou_branch_bce;
    }
    report.total = w.cls * report.cls + w.l1 * report.l1 + w.iou * report.iou_de_loss + w.iou_branch * report.iou_branch_bce;
    let mut total = g.scalar(0.0);
    for t in terms {
        total = g.add(total, t)?;
    }
    Ok((total, report))
}

/// Optimizer state carried across steps.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, store: &ParamStore, seed: u64) -> Self {
        Trainer { cfg: cfg.clone(), adam: AdamState::new(store), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Forward, loss, backward and one AdamW update at learning rate `lr`.
    pub fn step(
        &mut self,
        det: &Detector,
        store: &mut ParamStore,
        scene: &PreparedScene,
        gts: &[GroundTruth],
        lr: f64,
    ) -> Result<LossReport> {
        let mut g = Graph::new();
        let out = det.forward(&mut g, store, scene, &det.cfg.decoder.counts, Phase::Train, &mut self.rng)?;
        let (loss, report) = build_loss(&mut g, det, &out, gts, &self.cfg)?;
        let grads = g.backward(loss)?;
        let mut pg = grads.param_grads();
        if self.cfg.clip_norm > 0.0 {
            clip_grad_norm(&mut pg, self.cfg.clip_norm);
        }
        let adam = AdamConfig { lr, ..self.cfg.adam };
        adam_step(store, &pg, &mut self.adam, &adam);
        Ok(report)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.cfg.lr_drop_epoch {
            self.cfg.adam.lr * self.cfg.lr_decay
        } else {
            self.cfg.adam.lr
        }
    }

    /// One pass over `data` in a seeded shuffled order; returns the mean
    /// total loss.
    pub fn epoch(
        &mut self,
        det: &Detector,
        store: &mut ParamStore,
        data: &[(PreparedScene, Vec<GroundTruth>)],
        epoch: usize,
    ) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let lr = self.lr_at(epoch);
        let mut sum = 0.0;
        for i in order {
            sum += self.step(det, store, &data[i].0, &data[i].1, lr)?.total;
        }
        Ok(sum / data.len().max(1) as f64)
    }
}

impl Trainer {
    /// One pass over raw scenes, augmenting and preparing each visit.
    pub fn epoch_augmented(
        &mut self,
        det: &Detector,
        store: &mut ParamStore,
        scenes: &[(PointCloud, Vec<GroundTruth>)],
        bank: Option<&ObjectBank>,
        epoch: usize,
    ) -> Result<f64> {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut self.rng);
        let lr = self.lr_at(epoch);
        let grid = det.cfg.grid;
        let mut sum = 0.0;
        for i in order {
            let aug = self.cfg.augment.clone();
            let (cloud, gts) = augment_scene(&scenes[i].0, &scenes[i].1, bank, &aug, &grid, &mut self.rng);
            sum += self.step(det, store, &det.prepare(&cloud), &gts, lr)?.total;
        }
        Ok(sum / scenes.len().max(1) as f64)
    }
}

/// Trains on raw scenes. Without augmentation each scene is prepared once
/// and this matches [`train`]; otherwise scenes are augmented per visit,
/// pasting from `bank` or, when absent, a bank built from `scenes`.
pub fn train_scenes(
    det: &Detector,
    store: &mut ParamStore,
    scenes: &[(PointCloud, Vec<GroundTruth>)],
    bank: Option<&ObjectBank>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if !cfg.augment.is_active() {
        let data: Vec<_> = scenes.iter().map(|(c, g)| (det.prepare(c), g.clone())).collect();
        return train(det, store, &data, cfg, seed);
    }
    let own;
    let bank = match bank {
        Some(b) => Some(b),
        None if cfg.augment.paste > 0 => {
            own = ObjectBank::from_scenes(scenes.iter().map(|(c, g)| (c, g.as_slice())));
            Some(&own)
        }
        None => None,
    };
    let mut t = Trainer::new(cfg, store, seed);
    let mut hist = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let l = t.epoch_augmented(det, store, scenes, bank, e)?;
        log::info!("epoch {e}: mean loss {l:.4}");
        hist.push(l);
    }
    Ok(hist)
}

/// Trains for `cfg.epochs` epochs and returns the per-epoch mean losses.
pub fn train(
    det: &Detector,
    store: &mut ParamStore,
    data: &[(PreparedScene, Vec<GroundTruth>)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut t = Trainer::new(cfg, store, seed);
    let mut hist = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let l = t.epoch(det, store, data, e)?;
        log::info!("epoch {e}: mean loss {l:.4}");
        hist.push(l);
    }
    Ok(hist)
}
