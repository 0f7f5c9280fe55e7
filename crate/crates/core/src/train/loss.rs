use serde::{Deserialize, Serialize};

use crate::decoder::{normalized_params, Preds};
use crate::diff::{Graph, Tensor, Var};
use crate::error::Result;
use crate::geom3d::{iou_3d, iou_de, iou_de_sincos_with_grad, Box3D};
use crate::pointops::VoxelGridSpec;
use crate::Box3;

use super::matching::{hungarian, Assignment};

/// Probabilities are confined to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub bx: Box3,
    pub class_id: usize,
}

/// Weights of the four loss terms; the matching cost reuses the first three.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
    pub iou_branch: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls: 1.0, l1: 2.0, iou: 2.0, iou_branch: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 0.25, gamma: 2.0 }
    }
}

/// Plain values of one prediction, as seen by the matcher.
#[derive(Clone, Debug, PartialEq)]
pub struct PredRow {
    pub probs: Vec<f64>,
    /// Grid-normalized parameters (see [`normalized_params`]).
    pub params: [f64; 8],
    pub bx: Box3,
}

/// `w_cls·(1 − p̂_gt) + w_l1·L1 + w_iou·(1 − IoU_de)`.
pub fn match_cost(pred: &PredRow, gt: &GroundTruth, gt_params: &[f64; 8], w: &LossWeights) -> f64 {
    let l1 = pred.params.iter().zip(gt_params).map(|(a, b)| (a - b).abs()).sum::<f64>() / 8.0;
    w.cls * (1.0 - pred.probs[gt.class_id]) + w.l1 * l1 + w.iou * (1.0 - iou_de(&pred.bx, &gt.bx))
}

/// Each ground truth repeated `r` times in a row.
pub fn gt_repeat(gts: &[GroundTruth], r: usize) -> Vec<GroundTruth> {
    gts.iter().flat_map(|g| std::iter::repeat_n(*g, r.max(1))).collect()
}

/// Reads the plain prediction rows out of graph values.
pub fn pred_rows(g: &Graph, p: &Preds, grid: &VoxelGridSpec) -> Vec<PredRow> {
    let q = g.shape(p.probs)[0];
    let c = g.shape(p.probs)[1];
    let (probs, centers, ext, logext, sc) =
        (g.data(p.probs), g.data(p.centers), g.data(p.extents), g.data(p.log_extents), g.data(p.sincos));
    let e = grid.extent();
    (0..q)
        .map(|i| {
            let ctr = &centers[i * 3..i * 3 + 3];
            let bx =
                Box3D::new_unchecked(ctr[0], ctr[1], ctr[2], ext[i * 3], ext[i * 3 + 1], ext[i * 3 + 2], sc[i * 2].atan2(sc[i * 2 + 1]));
            let mut params = [0.0; 8];
            for a in 0..3 {
                params[a] = (ctr[a] - grid.origin[a]) / e[a];
                params[3 + a] = logext[i * 3 + a];
            }
            params[6] = sc[i * 2];
            params[7] = sc[i * 2 + 1];
            PredRow { probs: probs[i * c..(i + 1) * c].to_vec(), params, bx }
        })
        .collect()
}

/// Cost matrix `[pred][gt]` and its optimal assignment.
pub fn match_set(rows: &[PredRow], gts: &[GroundTruth], grid: &VoxelGridSpec, w: &LossWeights) -> Assignment {
    let gparams: Vec<[f64; 8]> = gts.iter().map(|g| normalized_params(&g.bx, &grid.origin, &grid.extent())).collect();
    let cost: Vec<Vec<f64>> = rows.iter().map(|r| gts.iter().zip(&gparams).map(|(g, gp)| match_cost(r, g, gp, w)).collect()).collect();
    hungarian(&cost)
}

/// Quality focal classification loss, summed over classes and averaged
/// over queries.
///
/// `probs` is `[Q, C]`; `positives` lists `(query, class)` of matched
/// predictions and `iou` their `[M]` decoupled IoUs (kept in the graph, so
/// the soft target passes gradient back to the boxes).
pub fn loss_cls(g: &mut Graph, probs: Var, positives: &[(usize, usize)], iou: Option<Var>, f: &FocalParams) -> Result<Var> {
    let s = g.shape(probs).to_vec();
    let (q, c) = (s[0], s[1]);
    let index: Vec<usize> = positives.iter().map(|&(qi, ci)| qi * c + ci).collect();
    let target = match iou {
        Some(v) if !index.is_empty() => g.scatter_flat(v, &index, &[q, c])?,
        _ => g.constant(Tensor::zeros(&[q, c])),
    };
    let mut not_c = Tensor::full(&[q, c], 1.0);
    for &i in &index {
        not_c.data[i] = 0.0;
    }
    let not_c = g.constant(not_c);
    let p = g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    // α̂_t = α·t + (1 − α)(1 − t)
    let a = g.scale(target, 2.0 * f.alpha - 1.0);
    let alpha_t = g.offset(a, 1.0 - f.alpha);
    let gap = g.sub(target, p)?;
    let gap = g.abs(gap);
    let modulating = g.power(gap, f.gamma);
    let inner = g.sub(not_c, p)?;
    let inner = g.abs(inner);
    let lg = g.log(inner);
    let t = g.mul(alpha_t, modulating)?;
    let t = g.mul(t, lg)?;
    let total = g.sum(t);
    Ok(g.scale(total, -1.0 / q.max(1) as f64))
}

/// Box rows `(cx, cy, cz, w, l, h, sin, cos)` of the given predictions.
fn box_rows(g: &mut Graph, p: &Preds, idx: &[usize]) -> Result<Var> {
    let rows = g.concat(&[p.centers, p.extents, p.sincos], 1)?;
    g.gather_rows(rows, idx)
}

/// Decoupled IoU of each matched pair `[M]`, differentiable in the
/// prediction.
pub fn matched_iou_de(g: &mut Graph, p: &Preds, a: &Assignment, gts: &[GroundTruth]) -> Result<Var> {
    let idx: Vec<usize> = a.pairs.iter().map(|&(q, _)| q).collect();
    let rows = box_rows(g, p, &idx)?;
    let data = g.data(rows).to_vec();
    let mut vals = Vec::with_capacity(idx.len());
    let mut jac = Vec::with_capacity(idx.len() * 8);
    for (r, &(_, gi)) in a.pairs.iter().enumerate() {
        let row: [f64; 8] = data[r * 8..r * 8 + 8].try_into().unwrap();
        let (v, d) = iou_de_sincos_with_grad(&row, &gts[gi].bx);
        vals.push(v);
        jac.extend(d.iter().map(|x| if x.is_finite() { *x } else { 0.0 }));
    }
    g.row_function(rows, vals, jac)
}

/// L1 over grid-normalized parameters and `1 − IoU_de`, both averaged over
/// matched pairs. `iou` is the output of [`matched_iou_de`].
pub fn loss_boxes(g: &mut Graph, p: &Preds, a: &Assignment, gts: &[GroundTruth], iou: Var, grid: &VoxelGridSpec) -> Result<(Var, Var)> {
    if a.pairs.is_empty() {
        return Ok((g.scalar(0.0), g.scalar(0.0)));
    }
    let e = grid.extent();
    let o = g.constant(Tensor::from_vec(grid.origin.to_vec()));
    let inv = g.constant(Tensor::from_vec(e.iter().map(|v| 1.0 / v).collect()));
    let cn = g.sub(p.centers, o)?;
    let cn = g.mul(cn, inv)?;
    let params = g.concat(&[cn, p.log_extents, p.sincos], 1)?;
    let idx: Vec<usize> = a.pairs.iter().map(|&(q, _)| q).collect();
    let params = g.gather_rows(params, &idx)?;
    let target: Vec<f64> = a.pairs.iter().flat_map(|&(_, gi)| normalized_params(&gts[gi].bx, &grid.origin, &e)).collect();
    let target = g.constant(Tensor { shape: vec![idx.len(), 8], data: target });
    let d = g.sub(params, target)?;
    let d = g.abs(d);
    let l1 = g.mean(d);
    let m = g.mean(iou);
    let neg = g.scale(m, -1.0);
    let iou_loss = g.offset(neg, 1.0);
    Ok((l1, iou_loss))
}

/// Binary cross-entropy of the IoU branch against the 3D IoU of each
/// matched pair; the target carries no gradient.
pub fn loss_iou_branch(g: &mut Graph, iou_prob: Var, rows: &[PredRow], a: &Assignment, gts: &[GroundTruth]) -> Result<Var> {
    if a.pairs.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let idx: Vec<usize> = a.pairs.iter().map(|&(q, _)| q).collect();
    let target: Vec<f64> = a.pairs.iter().map(|&(q, gi)| iou_3d(&rows[q].bx, &gts[gi].bx)).collect();
    let pr = g.gather_rows(iou_prob, &idx)?;
    let pr = g.reshape(pr, &[idx.len()])?;
    bce(g, pr, &target)
}

/// Mean binary cross-entropy of probabilities `p [M]` against constant
/// targets.
pub fn bce(g: &mut Graph, p: Var, target: &[f64]) -> Result<Var> {
    let n = target.len();
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let y = g.constant(Tensor::from_vec(target.to_vec()));
    let one_minus_y = g.constant(Tensor::from_vec(target.iter().map(|t| 1.0 - t).collect()));
    let lp = g.log(p);
    let neg = g.scale(p, -1.0);
    let q = g.offset(neg, 1.0);
    let lq = g.log(q);
    let a = g.mul(y, lp)?;
    let b = g.mul(one_minus_y, lq)?;
    let s = g.add(a, b)?;
    let s = g.sum(s);
    Ok(g.scale(s, -1.0 / n as f64))
}
