use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, DenseFeatureVolume, SparsePlan};
use crate::diff::{normal, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::pointops::{
    build_query_mixture, sample_random_queries, voxelize, Phase, PointCloud, QueryCounts, QueryKind, QuerySet, SparseVoxelTensor,
    VoxelGridSpec,
};

use super::attn::{group_self_attn, DeformAttn, DeformAttnCfg, SelfAttn};
use super::boxes::{MIN_EXTENT, REG_DIM};
use super::nn::{LayerNorm, Linear, Mlp};
use super::pe::positional_encoding_graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub points: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    /// Metres per unit of the raw center-offset output.
    pub delta_scale: f64,
    /// One head set shared by all layers instead of one per layer.
    pub shared_heads: bool,
    pub counts: QueryCounts,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 3,
            heads: 4,
            points: 4,
            dim: 64,
            ffn_dim: 128,
            delta_scale: 0.5,
            shared_heads: false,
            counts: QueryCounts::uniform(300),
        }
    }
}

/// Everything needed to build a [`Detector`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: VoxelGridSpec,
    pub num_classes: usize,
    /// Per-point feature width of the input clouds.
    pub point_features: usize,
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.backbone.validate()?;
        let d = &self.decoder;
        if d.layers < 2 {
            return Err(Error::Config("decoder needs at least 2 layers".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if d.dim < 6 {
            return Err(Error::Config("decoder dim must be at least 6".into()));
        }
        DeformAttnCfg { heads: d.heads, points: d.points, dim: d.dim }.validate()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub pos_mlp: Mlp,
    pub self_attn: SelfAttn,
    pub norm1: LayerNorm,
    pub cross: DeformAttn,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
}

#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub cls: Linear,
    pub reg: Mlp,
    pub iou: Linear,
}

/// Raw head outputs of one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerOut {
    /// Query positions this layer started from `[Q, 3]`.
    pub positions: Var,
    pub contents: Var,
    pub cls_logits: Var,
    /// `[Q, 8]`; the first three columns are metric center offsets.
    pub reg: Var,
    pub iou_logit: Var,
    /// `positions + reg[.., 0..3]`.
    pub centers: Var,
}

/// Predictions in decoded form, all `[Q, ·]`.
#[derive(Clone, Copy, Debug)]
pub struct Preds {
    pub probs: Var,
    pub centers: Var,
    pub extents: Var,
    pub log_extents: Var,
    pub sincos: Var,
    pub iou_prob: Var,
}

/// Contiguous rows of one query set inside the concatenated query tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SetSpan {
    pub kind: QueryKind,
    pub start: usize,
    pub len: usize,
}

pub struct ForwardOut {
    pub volume: DenseFeatureVolume,
    pub sets: Vec<SetSpan>,
    pub layers: Vec<LayerOut>,
    pub per_layer: Vec<Preds>,
    pub aggregated: Preds,
}

/// Scene data that does not depend on the weights.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub cloud: PointCloud,
    pub voxels: SparseVoxelTensor,
    pub voxelized: PointCloud,
    pub plan: SparsePlan,
}

/// Query sets feeding the decoder: rows concatenated in set order.
pub struct QueryInput {
    pub sets: Vec<SetSpan>,
    pub positions: Var,
    pub contents: Var,
}

/// Backbone, decoder and query parameters.
#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub layers: Vec<DecoderLayer>,
    pub heads: Vec<Heads>,
    pub learn_pos: ParamId,
    pub learn_content: ParamId,
    pub shared_content: ParamId,
}

fn bias_prior(n: usize, p: f64) -> Tensor {
    Tensor::full(&[n], -((1.0 - p) / p).ln())
}

impl Detector {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.decoder;
        let backbone = Backbone::new(&cfg.backbone, cfg.point_features + 4, store, rng)?;
        let vc = cfg.backbone.out_channels;
        let dac = DeformAttnCfg { heads: d.heads, points: d.points, dim: d.dim };
        let mut layers = Vec::with_capacity(d.layers);
        for i in 0..d.layers {
            let n = format!("decoder.{i}");
            layers.push(DecoderLayer {
                pos_mlp: Mlp::new(store, &format!("{n}.pos"), d.dim, d.dim, d.dim, rng),
                self_attn: SelfAttn::new(store, &format!("{n}.self"), d.dim, d.heads, rng),
                norm1: LayerNorm::new(store, &format!("{n}.norm1"), d.dim),
                cross: DeformAttn::new(store, &format!("{n}.cross"), dac, vc, rng)?,
                norm2: LayerNorm::new(store, &format!("{n}.norm2"), d.dim),
                ffn: Mlp::new(store, &format!("{n}.ffn"), d.dim, d.ffn_dim, d.dim, rng),
                norm3: LayerNorm::new(store, &format!("{n}.norm3"), d.dim),
            });
        }
        let n_heads = if d.shared_heads { 1 } else { d.layers };
        let mut heads = Vec::with_capacity(n_heads);
        for i in 0..n_heads {
            let n = format!("head.{i}");
            let cls_w = crate::diff::xavier_uniform(&[d.dim, cfg.num_classes], d.dim, cfg.num_classes, rng);
            heads.push(Heads {
                cls: Linear::with(store, &format!("{n}.cls"), cls_w, bias_prior(cfg.num_classes, 0.01)),
                reg: Mlp::new(store, &format!("{n}.reg"), d.dim, d.dim, REG_DIM, rng),
                iou: Linear::new(store, &format!("{n}.iou"), d.dim, 1, rng),
            });
        }
        let nl = d.counts.learnable;
        let pos = Tensor { shape: vec![nl, 3], data: sample_random_queries(&cfg.grid, nl, rng).concat() };
        let learn_pos = store.insert("query.learnable.positions", pos, true);
        let learn_content = store.insert("query.learnable.contents", normal(&[nl, d.dim], 0.02, rng), true);
        let shared_content = store.insert("query.shared.contents", normal(&[d.dim], 0.02, rng), true);
        Ok(Detector { cfg: cfg.clone(), backbone, layers, heads, learn_pos, learn_content, shared_content })
    }

    pub fn prepare(&self, cloud: &PointCloud) -> PreparedScene {
        let (voxels, voxelized) = voxelize(cloud, &self.cfg.grid);
        let plan = self.backbone.plan(&voxels);
        PreparedScene { cloud: cloud.clone(), voxels, voxelized, plan }
    }

    fn heads_for(&self, layer: usize) -> &Heads {
        &self.heads[if self.cfg.decoder.shared_heads { 0 } else { layer }]
    }

    /// Builds the query mixture and registers it in the graph.
    pub fn queries(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        scene: &PreparedScene,
        counts: &QueryCounts,
        phase: Phase,
        rng: &mut impl Rng,
    ) -> Result<QueryInput> {
        let dim = self.cfg.decoder.dim;
        let lp = store.get(self.learn_pos);
        let learnable = QuerySet {
            kind: QueryKind::Learnable,
            positions: lp.data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            contents: store.get(self.learn_content).clone(),
            trainable: true,
        };
        let mut use_counts = *counts;
        if use_counts.learnable > 0 {
            use_counts.learnable = learnable.len();
        }
        let shared = store.get(self.shared_content).data.clone();
        let mixture = build_query_mixture(&scene.cloud, &scene.voxelized, &learnable, &shared, &self.cfg.grid, &use_counts, phase, rng)?;
        let mut sets = Vec::new();
        let mut pos_parts = Vec::new();
        let mut content_parts = Vec::new();
        let mut start = 0;
        let shared_var = g.param(store, self.shared_content);
        for qs in &mixture {
            sets.push(SetSpan { kind: qs.kind, start, len: qs.len() });
            start += qs.len();
            if qs.kind == QueryKind::Learnable {
                pos_parts.push(g.param(store, self.learn_pos));
                content_parts.push(g.param(store, self.learn_content));
            } else {
                let t = Tensor { shape: vec![qs.len(), 3], data: qs.positions.concat() };
                pos_parts.push(g.constant(t));
                let ones = g.constant(Tensor::full(&[qs.len(), dim], 1.0));
                content_parts.push(g.mul(ones, shared_var)?);
            }
        }
        if sets.is_empty() {
            return Err(Error::Config("query mixture is empty".into()));
        }
        let positions = g.concat(&pos_parts, 0)?;
        let contents = g.concat(&content_parts, 0)?;
        Ok(QueryInput { sets, positions, contents })
    }

    /// Metric positions `[Q, 3]` → `[0,1]³` of the feature volume.
    fn normalize(&self, g: &mut Graph, spec: &VoxelGridSpec, p: Var) -> Result<Var> {
        let o = g.constant(Tensor::from_vec(spec.origin.to_vec()));
        let inv = g.constant(Tensor::from_vec(spec.extent().iter().map(|e| 1.0 / e).collect()));
        let d = g.sub(p, o)?;
        g.mul(d, inv)
    }

    /// Runs all decoder layers. Positions handed from one layer to the next
    /// are detached.
    pub fn decoder_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &QueryInput,
        volume: &DenseFeatureVolume,
    ) -> Result<Vec<LayerOut>> {
        let d = &self.cfg.decoder;
        let sizes: Vec<usize> = input.sets.iter().map(|s| s.len).collect();
        let mut pos = input.positions;
        let mut c = input.contents;
        let delta_scale = g.constant(Tensor::from_vec(vec![d.delta_scale; 3]));
        let mut outs = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let pn = self.normalize(g, &volume.spec, pos)?;
            let pe = positional_encoding_graph(g, pn, d.dim)?;
            let pe = layer.pos_mlp.apply(g, store, pe)?;

            let qk = g.add(c, pe)?;
            let sa = group_self_attn(g, store, &layer.self_attn, qk, c, &sizes)?;
            let h = g.add(c, sa)?;
            c = layer.norm1.apply(g, store, h)?;

            let q = g.add(c, pe)?;
            let values = layer.cross.project_volume(g, store, volume.data)?;
            let ca = layer.cross.apply(g, store, q, pn, values)?;
            let h = g.add(c, ca)?;
            c = layer.norm2.apply(g, store, h)?;

            let ff = layer.ffn.apply(g, store, c)?;
            let h = g.add(c, ff)?;
            c = layer.norm3.apply(g, store, h)?;

            let heads = self.heads_for(li);
            let cls_logits = heads.cls.apply(g, store, c)?;
            let raw = heads.reg.apply(g, store, c)?;
            let delta = g.slice(raw, 1, 0, 3)?;
            let delta = g.mul(delta, delta_scale)?;
            let rest = g.slice(raw, 1, 3, REG_DIM)?;
            let reg = g.concat(&[delta, rest], 1)?;
            let iou_logit = heads.iou.apply(g, store, c)?;
            let centers = g.add(pos, delta)?;
            outs.push(LayerOut { positions: pos, contents: c, cls_logits, reg, iou_logit, centers });
            pos = g.detach(centers);
        }
        Ok(outs)
    }

    /// Decoded predictions of one layer.
    pub fn layer_preds(&self, g: &mut Graph, out: &LayerOut) -> Result<Preds> {
        let max_ext = self.cfg.grid.diagonal();
        let probs = g.sigmoid(out.cls_logits);
        let log_extents = g.slice(out.reg, 1, 3, 6)?;
        let e = g.exp(log_extents);
        let extents = g.clamp(e, MIN_EXTENT, max_ext);
        let sincos = g.slice(out.reg, 1, 6, 8)?;
        let iou_prob = g.sigmoid(out.iou_logit);
        Ok(Preds { probs, centers: out.centers, extents, log_extents, sincos, iou_prob })
    }

    /// Full forward pass over a prepared scene.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        scene: &PreparedScene,
        counts: &QueryCounts,
        phase: Phase,
        rng: &mut impl Rng,
    ) -> Result<ForwardOut> {
        let volume = self.backbone.extract_features(g, store, &scene.voxels, &scene.plan)?;
        let input = self.queries(g, store, scene, counts, phase, rng)?;
        let layers = self.decoder_forward(g, store, &input, &volume)?;
        let per_layer = layers.iter().map(|l| self.layer_preds(g, l)).collect::<Result<Vec<_>>>()?;
        let aggregated = aggregate_layers(g, &per_layer)?;
        Ok(ForwardOut { volume, sets: input.sets, layers, per_layer, aggregated })
    }
}

/// Uniform average of layers `2..=L` in decoded space; yaw is averaged
/// through its sine and cosine.
pub fn aggregate_layers(g: &mut Graph, per_layer: &[Preds]) -> Result<Preds> {
    if per_layer.len() < 2 {
        return Err(Error::Config("layer aggregation needs at least 2 layers".into()));
    }
    let used = &per_layer[1..];
    let inv = 1.0 / used.len() as f64;
    let mut avg = |f: fn(&Preds) -> Var| -> Result<Var> {
        let mut acc = f(&used[0]);
        for p in &used[1..] {
            acc = g.add(acc, f(p))?;
        }
        Ok(if used.len() == 1 { acc } else { g.scale(acc, inv) })
    };
    let probs = avg(|p| p.probs)?;
    let centers = avg(|p| p.centers)?;
    let extents = avg(|p| p.extents)?;
    let sincos = avg(|p| p.sincos)?;
    let iou_prob = avg(|p| p.iou_prob)?;
    let log_extents = if used.len() == 1 { used[0].log_extents } else { g.log(extents) };
    Ok(Preds { probs, centers, extents, log_extents, sincos, iou_prob })
}
