use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{Detector, PreparedScene};
use crate::diff::ParamStore;
use crate::error::Result;
use crate::train::{train_scenes, GroundTruth};

use super::ap::{eval_ap, ApResult};
use super::config::RunConfig;
use super::infer::{infer_scene, InferConfig};
use super::merge::Detection;
use super::synth::SceneSample;

/// Seed of inference on scene `index` of a run seeded with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

pub fn build_model(cfg: &RunConfig, seed: u64) -> Result<(Detector, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let det = Detector::new(&cfg.model, &mut store, &mut rng)?;
    Ok((det, store))
}

pub fn prepare_all(det: &Detector, scenes: &[SceneSample]) -> Vec<(PreparedScene, Vec<GroundTruth>)> {
    scenes.iter().map(|s| (det.prepare(&s.cloud), s.gts.clone())).collect()
}

/// Detections for every scene, in scene order.
pub fn detect_all(det: &Detector, store: &ParamStore, scenes: &[SceneSample], cfg: &InferConfig, seed: u64) -> Result<Vec<Vec<Detection>>> {
    scenes.iter().enumerate().map(|(i, s)| infer_scene(det, store, &det.prepare(&s.cloud), cfg, scene_seed(seed, i))).collect()
}

pub struct Experiment {
    pub det: Detector,
    pub store: ParamStore,
    pub losses: Vec<f64>,
    pub train_secs: f64,
}

/// Builds and trains a model on `samples` from `seed`.
pub fn train_model(cfg: &RunConfig, samples: &[SceneSample], seed: u64) -> Result<Experiment> {
    let (det, mut store) = build_model(cfg, seed)?;
    let scenes: Vec<_> = samples.iter().map(|s| (s.cloud.clone(), s.gts.clone())).collect();
    let t = Instant::now();
    let losses = train_scenes(&det, &mut store, &scenes, None, &cfg.train, seed)?;
    Ok(Experiment { det, store, losses, train_secs: t.elapsed().as_secs_f64() })
}

/// AP of a trained model on `scenes` under the run's inference settings.
pub fn evaluate(exp: &Experiment, scenes: &[SceneSample], infer: &InferConfig, cfg: &RunConfig, seed: u64) -> Result<Vec<ApResult>> {
    let dets = detect_all(&exp.det, &exp.store, scenes, infer, seed)?;
    let gts: Vec<Vec<GroundTruth>> = scenes.iter().map(|s| s.gts.clone()).collect();
    eval_ap(&dets, &gts, cfg.model.num_classes, &cfg.eval)
}
