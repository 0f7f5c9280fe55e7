use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::{grad_check, random_projection};
use crate::pointops::{voxelize, PointCloud};

fn identity_kernel(c: usize) -> Tensor {
    let mut w = Tensor::zeros(&[c, c, 3, 3, 3]);
    for i in 0..c {
        w.data[(i * c + i) * 27 + 13] = 1.0;
    }
    w
}

#[test]
fn single_voxel_identity_submanifold() {
    let spec = VoxelGridSpec::new([0.0; 3], [1.0; 3], [4, 4, 4]).unwrap();
    let t = SparseVoxelTensor { spec, coords: vec![[2, 1, 3]], feat_dim: 2, feats: vec![0.5, -1.5] };
    let out = sparse_conv3d(&t, ConvKind::Submanifold, &identity_kernel(2)).unwrap();
    assert_eq!(out, t);
}

#[test]
fn regular_stride_two_example() {
    let spec = VoxelGridSpec::new([0.0; 3], [1.0; 3], [4, 4, 4]).unwrap();
    let t = SparseVoxelTensor { spec, coords: vec![[0, 0, 0], [1, 1, 1]], feat_dim: 1, feats: vec![1.0, 2.0] };
    let out = sparse_conv3d(&t, ConvKind::Regular, &Tensor::full(&[1, 1, 3, 3, 3], 1.0)).unwrap();
    assert_eq!(out.coords, vec![[0, 0, 0]]);
    assert_eq!(out.feats, vec![3.0]);
}

#[test]
fn densify_round_trip() {
    let spec = VoxelGridSpec::new([0.0; 3], [1.0; 3], [3, 2, 4]).unwrap();
    let t =
        SparseVoxelTensor { spec, coords: vec![[0, 0, 1], [1, 1, 3], [2, 0, 0]], feat_dim: 2, feats: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0] };
    let d = densify(&t);
    assert_eq!(d.data.iter().filter(|v| **v != 0.0).count(), 6);
    assert_eq!(dense_to_sparse(&d, &t.coords, &spec), t);
    let mut g = Graph::new();
    let f = g.constant(Tensor { shape: vec![3, 2], data: t.feats.clone() });
    let v = sparse_to_dense(&mut g, f, &t.coords, &spec).unwrap();
    assert_eq!(g.value(v.data), &d);
}

#[test]
fn empty_densify_is_zero() {
    let spec = VoxelGridSpec::new([0.0; 3], [1.0; 3], [2, 2, 2]).unwrap();
    let d = densify(&SparseVoxelTensor::empty(spec, 3));
    assert_eq!(d.shape, vec![3, 2, 2, 2]);
    assert!(d.data.iter().all(|v| *v == 0.0));
}

fn unit_with(store: &mut ParamStore, w: Tensor, bias: Vec<f64>) -> ConvUnit {
    let c = bias.len();
    ConvUnit {
        weight: store.insert("w", w, true),
        bias: store.insert("b", Tensor::from_vec(bias), true),
        gamma: store.insert("g", Tensor::full(&[c], 1.0), true),
        beta: store.insert("be", Tensor::zeros(&[c]), true),
    }
}

#[test]
fn identity_dense_block_preserves_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let unit = unit_with(&mut store, identity_kernel(2), vec![0.0, 0.0]);
    // non-negative input so the relu is transparent
    let mut x = crate::diff::normal(&[2, 3, 3, 2], 1.0, &mut rng);
    x.data.iter_mut().for_each(|v| *v = v.abs());
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = dense_conv3d_block(&mut g, &store, xv, &unit, false).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn zero_input_gives_bias_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let unit = unit_with(&mut store, kaiming_uniform(&[2, 1, 3, 3, 3], 27, &mut rng), vec![0.7, -0.3]);
    let mut g = Graph::new();
    let xv = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let y = dense_conv3d_block(&mut g, &store, xv, &unit, false).unwrap();
    let d = g.data(y);
    assert!(d[..8].iter().all(|v| *v == 0.7));
    assert!(d[8..].iter().all(|v| *v == 0.0));
}

#[test]
fn dense_block_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = crate::diff::normal(&[2, 3, 2, 3], 1.0, &mut rng);
    let w = crate::diff::normal(&[2, 2, 3, 3, 3], 0.3, &mut rng);
    let rep = grad_check(&[x, w], 1e-6, |g, v| {
        let mut store = ParamStore::new();
        let unit = unit_with(&mut store, Tensor::zeros(&[2, 2, 3, 3, 3]), vec![0.1, -0.2]);
        // route the checked weight through the graph in place of the stored one
        let y = g.conv3d(v[0], v[1], 1)?;
        let s = g.shape(y).to_vec();
        let flat = g.reshape(y, &[2, s[1] * s[2] * s[3]])?;
        let rows = g.transpose(flat)?;
        let b = g.param(&store, unit.bias);
        let rows = g.add(rows, b)?;
        let gm = g.param(&store, unit.gamma);
        let bt = g.param(&store, unit.beta);
        let rows = channel_norm_rows(g, rows, gm, bt)?;
        let rows = g.relu(rows);
        random_projection(g, rows, 4)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-5, "{rep:?}");
}

fn scene(seed: u64, n: usize, grid: usize) -> SparseVoxelTensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = VoxelGridSpec::new([0.0; 3], [1.0; 3], [grid; 3]).unwrap();
    let pts = (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(0.0..grid as f64))).collect();
    voxelize(&PointCloud::from_points(pts), &spec).0
}

#[test]
fn downsampled_volume_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let cfg = BackboneConfig { sparse_channels: vec![4, 4, 4, 4], out_channels: 4, ..Default::default() };
    let bb = Backbone::new(&cfg, 4, &mut store, &mut rng).unwrap();
    let s = scene(1, 300, 32);
    let plan = bb.plan(&s);
    let mut g = Graph::new();
    let v = bb.extract_features(&mut g, &store, &s, &plan).unwrap();
    assert_eq!(g.shape(v.data), &[4, 8, 8, 8]);
    assert_eq!(v.spec.dims, [8, 8, 8]);
    assert_eq!(cfg.downsample_factor(), 4);

    let empty = SparseVoxelTensor::empty(s.spec, 3);
    let plan = bb.plan(&empty);
    let mut g = Graph::new();
    let v = bb.extract_features(&mut g, &store, &empty, &plan).unwrap();
    let d = g.data(v.data);
    // zero input with zero biases and betas stays zero
    assert!(d.iter().all(|x| *x == 0.0));
}

#[test]
fn extraction_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig { sparse_channels: vec![4, 6, 6, 8], out_channels: 5, ..Default::default() };
        let bb = Backbone::new(&cfg, 4, &mut store, &mut rng).unwrap();
        let s = scene(2, 400, 16);
        let plan = bb.plan(&s);
        let mut g = Graph::new();
        let v = bb.extract_features(&mut g, &store, &s, &plan).unwrap();
        g.data(v.data).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn dense_stage_fills_unoccupied_center() {
    // ring of occupied cells around an empty center cell
    let spec = VoxelGridSpec::new([0.0; 3], [1.0; 3], [3, 3, 3]).unwrap();
    let coords = vec![[0, 1, 1], [2, 1, 1], [1, 0, 1], [1, 2, 1]];
    let mut g = Graph::new();
    let f = g.constant(Tensor::full(&[4, 1], 1.0));
    let v = sparse_to_dense(&mut g, f, &coords, &spec).unwrap();
    let center = spec.linear([1, 1, 1]);
    assert_eq!(g.data(v.data)[center], 0.0);
    let mut store = ParamStore::new();
    let unit = unit_with(&mut store, Tensor::full(&[1, 1, 3, 3, 3], 0.1), vec![0.0]);
    let y = dense_conv3d_block(&mut g, &store, v.data, &unit, true).unwrap();
    assert!(g.data(y)[center] > 0.0);
}

#[test]
fn submanifold_keeps_site_set() {
    let s = scene(5, 200, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = kaiming_uniform(&[2, 3, 3, 3, 3], 81, &mut rng);
    let out = sparse_conv3d(&s, ConvKind::Submanifold, &w).unwrap();
    assert_eq!(out.coords, s.coords);
}
