//! Point-cloud preprocessing: voxel grids, dynamic voxelization, farthest
//! point sampling and assembly of the query-point mixture.

mod cloud;
mod fps;
mod query;
mod voxel;

pub use cloud::{PointCloud, VoxelGridSpec};
pub use fps::{fps, fps_from, max_min_violations};
pub use query::{build_query_mixture, sample_random_queries, Phase, QueryCounts, QueryKind, QuerySet};
pub use voxel::{voxelize, SparseVoxelTensor};
