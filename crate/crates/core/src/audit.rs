//! The full finite-difference gradient audit: every autodiff primitive, the
//! deformable cross-attention and the quality focal loss through the
//! decoupled IoU.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{DeformAttn, DeformAttnCfg};
use crate::diff::audit::primitive_audit;
use crate::diff::{grad_check, normal, random_projection, GradCheckReport, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::geom3d::{fd_check_iou_de, iou_de_sincos_with_grad, Box3D};
use crate::train::{loss_cls, FocalParams};

/// One audited function and its acceptance tolerance.
#[derive(Clone, Debug)]
pub struct AuditEntry {
    pub name: String,
    pub report: GradCheckReport,
    pub tol: f64,
}

impl AuditEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < self.tol
    }
}

#[derive(Clone, Debug, Default)]
pub struct AuditSummary {
    pub entries: Vec<AuditEntry>,
    /// Box-pair probes skipped because a finite-difference step crossed a
    /// change of clipping topology.
    pub flagged: usize,
}

impl AuditSummary {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(AuditEntry::passed)
    }
}

pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const COMPOSITE_TOL: f64 = 1e-3;

fn deform_attn_checks(seed: u64, out: &mut Vec<AuditEntry>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DeformAttnCfg { heads: 2, points: 2, dim: 6 };
    let mut store = ParamStore::new();
    let d = DeformAttn::new(&mut store, "audit", cfg, 3, &mut rng)?;
    // non-zero offset weights so positions move the samples nonlinearly
    let ow = store.get_mut(d.offsets.w);
    for v in &mut ow.data {
        *v = rng.gen_range(-0.3..0.3);
    }
    let c = normal(&[3, 6], 1.0, &mut rng);
    let p = Tensor::new(vec![3, 3], (0..9).map(|_| rng.gen_range(0.3..0.7)).collect())?;
    let v = normal(&[3, 3, 4, 3], 1.0, &mut rng);
    let names = ["deform_cross_attn/contents", "deform_cross_attn/positions", "deform_cross_attn/volume"];
    for (k, name) in names.iter().enumerate() {
        let fixed = [c.clone(), p.clone(), v.clone()];
        let report = grad_check(std::slice::from_ref(&fixed[k]), 1e-6, |g, x| {
            let mut vars = [g.constant(fixed[0].clone()), g.constant(fixed[1].clone()), g.constant(fixed[2].clone())];
            vars[k] = x[0];
            let vals = d.project_volume(g, &store, vars[2])?;
            let o = d.apply(g, &store, vars[0], vars[1], vals)?;
            random_projection(g, o, 17)
        })?;
        out.push(AuditEntry { name: name.to_string(), report, tol: COMPOSITE_TOL });
    }
    Ok(())
}

fn random_box(rng: &mut ChaCha8Rng) -> Box3D<f64> {
    Box3D::new(
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.3..0.3),
        rng.gen_range(0.6..1.6),
        rng.gen_range(0.6..1.6),
        rng.gen_range(0.6..1.6),
        rng.gen_range(-3.0..3.0),
    )
    .unwrap()
}

/// Quality focal loss checks over `pairs` random box pairs; returns the
/// worst report for the probability input and for the box input, plus the
/// number of flagged pairs.
fn focal_checks(seed: u64, pairs: usize, out: &mut Vec<AuditEntry>) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_p: Option<GradCheckReport> = None;
    let mut worst_b: Option<GradCheckReport> = None;
    let mut flagged = 0;
    let mut done = 0;
    while done < pairs {
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        match fd_check_iou_de(&a.to_array(), &b, 1e-6) {
            Err(Error::NonDifferentiable(_)) => {
                flagged += 1;
                continue;
            }
            Err(e) => return Err(e),
            Ok(_) => {}
        }
        if crate::geom3d::iou_de(&a, &b) == 0.0 {
            continue;
        }
        done += 1;
        let probs = Tensor::new(vec![2, 2], (0..4).map(|_| rng.gen_range(0.05..0.95)).collect())?;
        let row = Tensor::new(vec![1, 8], vec![a.cx, a.cy, a.cz, a.w, a.l, a.h, a.yaw.sin(), a.yaw.cos()])?;
        let f = FocalParams::default();
        let loss = |g: &mut crate::diff::Graph, pv: crate::diff::Var, rv: crate::diff::Var| {
            let data: [f64; 8] = g.data(rv).try_into().unwrap();
            let (v, j) = iou_de_sincos_with_grad(&data, &b);
            let iou = g.row_function(rv, vec![v], j.to_vec())?;
            loss_cls(g, pv, &[(1, 0)], Some(iou), &f)
        };
        let rp = grad_check(std::slice::from_ref(&probs), 1e-6, |g, x| {
            let r = g.constant(row.clone());
            loss(g, x[0], r)
        })?;
        let rb = grad_check(std::slice::from_ref(&row), 1e-6, |g, x| {
            let p = g.constant(probs.clone());
            loss(g, p, x[0])
        })?;
        if worst_p.is_none_or(|w| rp.max_rel_err > w.max_rel_err) {
            worst_p = Some(rp);
        }
        if worst_b.is_none_or(|w| rb.max_rel_err > w.max_rel_err) {
            worst_b = Some(rb);
        }
    }
    if let (Some(p), Some(b)) = (worst_p, worst_b) {
        out.push(AuditEntry { name: "quality_focal/probabilities".into(), report: p, tol: COMPOSITE_TOL });
        out.push(AuditEntry { name: "quality_focal/box_params".into(), report: b, tol: COMPOSITE_TOL });
    }
    Ok(flagged)
}

/// Runs the whole audit.
pub fn full_gradient_audit(seed: u64) -> Result<AuditSummary> {
    let mut entries: Vec<AuditEntry> =
        primitive_audit(seed, 3)?.into_iter().map(|(n, report)| AuditEntry { name: n.to_string(), report, tol: PRIMITIVE_TOL }).collect();
    deform_attn_checks(seed ^ 0x5eed, &mut entries)?;
    let flagged = focal_checks(seed ^ 0xf0ca1, 20, &mut entries)?;
    Ok(AuditSummary { entries, flagged })
}
