//! Inference-time query assembly, score fusion, cross-set box merging, AP
//! evaluation, synthetic scenes, file formats and run configuration.

mod ap;
mod config;
mod experiment;
mod infer;
pub mod io;
mod merge;
mod synth;

pub use ap::{eval_ap, interpolated_ap, recall_grid, ApResult, EvalConfig};
pub use config::{apply_override, RunConfig};
pub use experiment::{build_model, detect_all, evaluate, prepare_all, scene_seed, train_model, Experiment};
pub use infer::{detect_sets, infer_scene, InferConfig};
pub use merge::{fuse_score, merge_boxes, Detection, MergeConfig};
pub use synth::{box_contains, gen_scene, gen_synthetic, scene_bounds, ClassSpec, SceneKind, SceneSample, SynthConfig};
