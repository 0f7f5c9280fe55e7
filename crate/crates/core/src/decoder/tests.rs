use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::{BackboneConfig, DenseFeatureVolume};
use crate::diff::{grad_check, normal, random_projection, Graph, ParamStore, Tensor};
use crate::pointops::{Phase, PointCloud, QueryCounts, QueryKind, VoxelGridSpec};

pub(crate) fn tiny_config(classes: usize) -> ModelConfig {
    ModelConfig {
        grid: VoxelGridSpec::new([0.0; 3], [0.25; 3], [16, 16, 16]).unwrap(),
        num_classes: classes,
        point_features: 0,
        backbone: BackboneConfig { sparse_channels: vec![4, 8, 8, 8], sparse_strides: vec![1, 2, 1, 2], dense_blocks: 1, out_channels: 8 },
        decoder: DecoderConfig {
            layers: 3,
            heads: 2,
            points: 2,
            dim: 12,
            ffn_dim: 16,
            delta_scale: 0.5,
            shared_heads: false,
            counts: QueryCounts::uniform(6),
        },
    }
}

fn tiny_cloud(seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::from_points((0..300).map(|_| [0, 1, 2].map(|_| rng.gen_range(0.5..3.5))).collect())
}

#[test]
fn mask_is_block_diagonal() {
    let m = group_mask(&[2, 3, 1]);
    let group = [0, 0, 1, 1, 1, 2];
    for i in 0..6 {
        for j in 0..6 {
            let want = if group[i] == group[j] { 0.0 } else { MASK_NEG };
            assert_eq!(m.data[i * 6 + j], want);
        }
    }
}

fn attn_setup() -> (ParamStore, SelfAttn) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let a = SelfAttn::new(&mut store, "sa", 8, 2, &mut rng);
    (store, a)
}

#[test]
fn single_group_equals_full_attention() {
    let (store, a) = attn_setup();
    let x = normal(&[5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let mut g = Graph::new();
    let xv = g.constant(x);
    let y1 = group_self_attn(&mut g, &store, &a, xv, xv, &[5]).unwrap();
    let y2 = a.apply(&mut g, &store, xv, xv, None).unwrap();
    assert_eq!(g.data(y1), g.data(y2));
}

#[test]
fn groups_do_not_interact() {
    let (store, a) = attn_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = normal(&[7, 8], 1.0, &mut rng);
    let mut x2 = x.clone();
    for v in &mut x2.data[3 * 8..] {
        *v += rng.gen_range(-5.0..5.0);
    }
    let run = |t: Tensor| {
        let mut g = Graph::new();
        let xv = g.constant(t);
        let y = group_self_attn(&mut g, &store, &a, xv, xv, &[3, 4]).unwrap();
        g.data(y)[..3 * 8].to_vec()
    };
    assert_eq!(run(x), run(x2));
}

fn deform_setup(seed: u64) -> (ParamStore, DeformAttn) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = DeformAttnCfg { heads: 2, points: 3, dim: 4 };
    let d = DeformAttn::new(&mut store, "da", cfg, 3, &mut rng).unwrap();
    (store, d)
}

#[test]
fn collapsed_offsets_project_the_reference_feature() {
    let (mut store, d) = deform_setup(5);
    store.get_mut(d.offsets.b).data.iter_mut().for_each(|v| *v = 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    *store.get_mut(d.weights.w) = normal(&[4, 6], 1.0, &mut rng);
    let vol = normal(&[3, 3, 4, 2], 1.0, &mut rng);
    let query = normal(&[2, 4], 1.0, &mut rng);
    let refs = Tensor::new(vec![2, 3], vec![0.3, 0.6, 0.4, 0.8, 0.1, 0.5]).unwrap();

    let mut g = Graph::new();
    let v = g.constant(vol.clone());
    let q = g.constant(query);
    let r = g.constant(refs.clone());
    let vals = d.project_volume(&mut g, &store, v).unwrap();
    let out = d.apply(&mut g, &store, q, r, vals).unwrap();

    // oracle: sample raw features at the reference, then value and output maps
    let mut h = Graph::new();
    let v = h.constant(vol);
    let r = h.constant(refs);
    let f = h.trilinear_sample(v, r).unwrap();
    let f = d.value.apply(&mut h, &store, f).unwrap();
    let want = d.out.apply(&mut h, &store, f).unwrap();
    for (a, b) in g.data(out).iter().zip(h.data(want)) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn constant_volume_ignores_position() {
    let (store, d) = deform_setup(7);
    let query = normal(&[1, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
    let run = |p: [f64; 3]| {
        let mut g = Graph::new();
        let v = g.constant(Tensor::full(&[3, 4, 4, 4], 0.7));
        let q = g.constant(query.clone());
        let r = g.constant(Tensor::new(vec![1, 3], p.to_vec()).unwrap());
        let vals = d.project_volume(&mut g, &store, v).unwrap();
        let o = d.apply(&mut g, &store, q, r, vals).unwrap();
        g.data(o).to_vec()
    };
    let a = run([0.2, 0.5, 0.5]);
    let b = run([0.9, 0.1, 0.35]);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn deform_attention_gradients() {
    let (mut store, d) = deform_setup(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    // non-trivial offsets and weights so every path carries gradient
    *store.get_mut(d.offsets.w) = normal(&[4, 18], 0.3, &mut rng);
    *store.get_mut(d.weights.w) = normal(&[4, 6], 0.5, &mut rng);
    let c = normal(&[3, 4], 1.0, &mut rng);
    let p = Tensor::new(vec![3, 3], (0..9).map(|_| rng.gen_range(0.25..0.75)).collect()).unwrap();
    let v = normal(&[3, 4, 3, 4], 1.0, &mut rng);
    let rep = grad_check(&[c, p, v], 1e-6, |g, x| {
        let vals = d.project_volume(g, &store, x[2])?;
        let o = d.apply(g, &store, x[0], x[1], vals)?;
        random_projection(g, o, 3)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

fn forward_tiny(det: &Detector, store: &ParamStore, seed: u64) -> (Graph, ForwardOut) {
    let scene = det.prepare(&tiny_cloud(seed));
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = det.forward(&mut g, store, &scene, &det.cfg.decoder.counts, Phase::Train, &mut rng).unwrap();
    (g, out)
}

#[test]
fn zero_refinement_keeps_positions() {
    let mut cfg = tiny_config(2);
    cfg.decoder.layers = 2;
    let mut store = ParamStore::new();
    let det = Detector::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for h in &det.heads {
        store.get_mut(h.reg.l2.w).data.iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(h.reg.l2.b).data.iter_mut().for_each(|v| *v = 0.0);
    }
    let (g, out) = forward_tiny(&det, &store, 3);
    assert_eq!(g.data(out.layers[0].positions), g.data(out.layers[1].positions));
    assert_eq!(g.data(out.layers[1].positions), g.data(out.layers[1].centers));
}

#[test]
fn refinement_telescopes() {
    let cfg = tiny_config(2);
    let mut store = ParamStore::new();
    let det = Detector::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let (g, out) = forward_tiny(&det, &store, 4);
    assert_eq!(
        out.sets.iter().map(|s| s.kind).collect::<Vec<_>>(),
        vec![QueryKind::Learnable, QueryKind::NonlearnableRaw, QueryKind::NonlearnableVoxel]
    );
    let mut acc = g.data(out.layers[0].positions).to_vec();
    for l in &out.layers {
        assert_eq!(g.data(l.positions), &acc[..]);
        let reg = g.data(l.reg);
        for (i, a) in acc.iter_mut().enumerate() {
            *a += reg[(i / 3) * REG_DIM + i % 3];
        }
        assert_eq!(g.data(l.centers), &acc[..]);
    }
}

#[test]
fn only_learnable_positions_get_gradient() {
    let cfg = tiny_config(2);
    let mut store = ParamStore::new();
    let det = Detector::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let (mut g, out) = forward_tiny(&det, &store, 5);
    let s = g.sum(out.aggregated.centers);
    let p = g.sum(out.aggregated.probs);
    let loss = g.add(s, p).unwrap();
    let grads = g.backward(loss).unwrap();
    let pos = out.layers[0].positions;
    // the concatenation itself is differentiable; only its learnable rows reach a parameter
    let gp = grads.get(pos).unwrap();
    let lp: Vec<_> = grads.param_grads().into_iter().filter(|(id, _)| *id == det.learn_pos).collect();
    assert_eq!(lp.len(), 1);
    assert!(lp[0].1.iter().any(|v| *v != 0.0));
    assert_eq!(&gp[..18], &lp[0].1[..]);
    assert!(!g.requires_grad(out.layers[1].positions));
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny_config(3);
    let run = || {
        let mut store = ParamStore::new();
        let det = Detector::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let (g, out) = forward_tiny(&det, &store, 6);
        (g.data(out.aggregated.probs).to_vec(), g.data(out.aggregated.centers).to_vec())
    };
    assert_eq!(run(), run());
}

fn fake_preds(g: &mut Graph, seed: u64) -> Preds {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = |shape: &[usize], lo: f64| {
        let n: usize = shape.iter().product();
        g.constant(Tensor { shape: shape.to_vec(), data: (0..n).map(|_| rng.gen_range(lo..1.0)).collect() })
    };
    let probs = c(&[4, 2], 0.0);
    let centers = c(&[4, 3], -1.0);
    let extents = c(&[4, 3], 0.1);
    let sincos = c(&[4, 2], -1.0);
    let iou_prob = c(&[4, 1], 0.0);
    let log_extents = g.log(extents);
    Preds { probs, centers, extents, log_extents, sincos, iou_prob }
}

#[test]
fn aggregation_rules() {
    let mut g = Graph::new();
    let a = fake_preds(&mut g, 1);
    let b = fake_preds(&mut g, 2);
    let c = fake_preds(&mut g, 3);
    let two = aggregate_layers(&mut g, &[a, b]).unwrap();
    assert_eq!(g.data(two.centers), g.data(b.centers));
    let moved = aggregate_layers(&mut g, &[c, b]).unwrap();
    assert_eq!(g.data(moved.probs), g.data(two.probs));
    let same = aggregate_layers(&mut g, &[a, b, b]).unwrap();
    assert_eq!(g.data(same.extents), g.data(b.extents));
    let p1 = aggregate_layers(&mut g, &[a, b, c, a]).unwrap();
    let p2 = aggregate_layers(&mut g, &[c, a, b, c]).unwrap();
    for (x, y) in g.data(p1.sincos).iter().zip(g.data(p2.sincos)) {
        assert!((x - y).abs() < 1e-15);
    }
    let mid = g.data(p1.centers)[0];
    let want = (g.data(b.centers)[0] + g.data(c.centers)[0] + g.data(a.centers)[0]) / 3.0;
    assert!((mid - want).abs() < 1e-15);
    assert!(aggregate_layers(&mut g, &[a]).is_err());
}

#[test]
fn test_phase_adds_random_set() {
    let cfg = tiny_config(1);
    let mut store = ParamStore::new();
    let det = Detector::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let scene = det.prepare(&tiny_cloud(1));
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = det.forward(&mut g, &store, &scene, &cfg.decoder.counts, Phase::Test, &mut rng).unwrap();
    assert_eq!(out.sets.len(), 4);
    assert_eq!(g.shape(out.aggregated.probs), &[24, 1]);
    let _: &DenseFeatureVolume = &out.volume;
}
