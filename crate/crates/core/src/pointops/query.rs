use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};

use super::cloud::{PointCloud, VoxelGridSpec};
use super::fps::fps;

/// Origin of a query set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QueryKind {
    Learnable,
    NonlearnableRaw,
    NonlearnableVoxel,
    Random,
}

impl QueryKind {
    pub const ALL: [QueryKind; 4] = [QueryKind::Learnable, QueryKind::NonlearnableRaw, QueryKind::NonlearnableVoxel, QueryKind::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryKind::Learnable => "learnable",
            QueryKind::NonlearnableRaw => "nonlearnable_raw",
            QueryKind::NonlearnableVoxel => "nonlearnable_voxel",
            QueryKind::Random => "random",
        }
    }
}

impl fmt::Display for QueryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QueryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QueryKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| Error::Config(format!("unknown query kind {s:?}")))
    }
}

/// A group of query points with content embeddings `[n, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub kind: QueryKind,
    pub positions: Vec<[f64; 3]>,
    pub contents: Tensor,
    pub trainable: bool,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Frozen set whose every query carries the same content vector.
    pub fn frozen(kind: QueryKind, positions: Vec<[f64; 3]>, shared: &[f64]) -> Self {
        let n = positions.len();
        let data = shared.iter().copied().cycle().take(n * shared.len()).collect();
        QuerySet { kind, positions, contents: Tensor { shape: vec![n, shared.len()], data }, trainable: false }
    }
}

/// Query counts per kind; a zero count drops that set from the mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryCounts {
    pub learnable: usize,
    pub raw: usize,
    pub voxel: usize,
    pub random: usize,
}

impl QueryCounts {
    pub fn uniform(n: usize) -> Self {
        QueryCounts { learnable: n, raw: n, voxel: n, random: n }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

/// `k` points i.i.d. uniform over the grid volume.
pub fn sample_random_queries(spec: &VoxelGridSpec, k: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let lo = spec.origin;
    let hi = spec.upper();
    (0..k).map(|_| [0, 1, 2].map(|a| rng.gen_range(lo[a]..hi[a]))).collect()
}

/// FPS picks, topped up by sampling with replacement when the cloud is
/// smaller than `k`.
fn sample_positions(cloud: &PointCloud, k: usize, what: &str, rng: &mut impl Rng) -> Result<Vec<[f64; 3]>> {
    let n = cloud.len();
    if k > n {
        if n == 0 {
            return Err(Error::InsufficientPoints { requested: k, available: 0 });
        }
        log::warn!("{what}: {n} points for {k} queries, sampling the remainder with replacement");
        let mut idx = fps(&cloud.points, n)?;
        idx.extend((n..k).map(|_| rng.gen_range(0..n)));
        return Ok(idx.into_iter().map(|i| cloud.points[i]).collect());
    }
    Ok(fps(&cloud.points, k)?.into_iter().map(|i| cloud.points[i]).collect())
}

/// Assembles the query mixture: learnable, FPS of the raw cloud, FPS of the
/// voxelized cloud, and at test time uniform random points.
///
/// Non-learnable sets share the single content vector `shared_content`.
#[allow(clippy::too_many_arguments)]
pub fn build_query_mixture(
    cloud: &PointCloud,
    voxelized: &PointCloud,
    learnable: &QuerySet,
    shared_content: &[f64],
    spec: &VoxelGridSpec,
    counts: &QueryCounts,
    phase: Phase,
    rng: &mut impl Rng,
) -> Result<Vec<QuerySet>> {
    let mut sets = Vec::with_capacity(4);
    if counts.learnable > 0 {
        if learnable.len() != counts.learnable {
            return Err(Error::Config(format!("learnable set has {} queries, configured {}", learnable.len(), counts.learnable)));
        }
        sets.push(learnable.clone());
    }
    if counts.raw > 0 {
        let p = sample_positions(cloud, counts.raw, "raw-cloud queries", rng)?;
        sets.push(QuerySet::frozen(QueryKind::NonlearnableRaw, p, shared_content));
    }
    if counts.voxel > 0 {
        let p = sample_positions(voxelized, counts.voxel, "voxelized-cloud queries", rng)?;
        sets.push(QuerySet::frozen(QueryKind::NonlearnableVoxel, p, shared_content));
    }
    if phase == Phase::Test && counts.random > 0 {
        let p = sample_random_queries(spec, counts.random, rng);
        sets.push(QuerySet::frozen(QueryKind::Random, p, shared_content));
    }
    Ok(sets)
}
