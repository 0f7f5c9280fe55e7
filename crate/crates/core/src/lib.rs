//! Point-cloud 3D object detection with a point-query detection transformer.
//!
//! The crate is organized bottom-up:
//!
//! * [`geom3d`] oriented boxes and the IoU family (3D, decoupled, axis-aligned)
//! * [`pointops`] voxelization, farthest point sampling, query construction
//! * [`diff`] a small reverse-mode autodiff engine, AdamW and checkpoints
//! * [`backbone`] sparse + dense 3D convolution feature extractor
//! * [`decoder`] query-point transformer with deformable point-voxel attention
//! * [`train`] Hungarian matching, losses and the optimization loop
//! * [`infer_eval`] inference, box merging, AP evaluation, synthetic data, IO
//!
//! Geometry, matching and evaluation are generic over [`Real`]; the learned
//! model runs in `f64`.

pub mod audit;
pub mod backbone;
pub mod decoder;
pub mod diff;
pub mod error;
pub mod geom3d;
pub mod infer_eval;
pub mod pointops;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dual, Real};

/// Box in double precision, the representation used throughout the model.
pub type Box3 = geom3d::Box3D<f64>;
/// Single precision box.
pub type Box3f = geom3d::Box3D<f32>;
