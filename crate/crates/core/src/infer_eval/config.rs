use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::decoder::{DecoderConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::pointops::{QueryCounts, VoxelGridSpec};
use crate::train::{AugmentConfig, TrainConfig};

use super::ap::EvalConfig;
use super::infer::InferConfig;
use super::synth::{scene_bounds, SceneKind, SynthConfig};

/// Everything a run needs, loadable from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Desk-scale indoor preset.
    pub fn indoor() -> Self {
        let synth = SynthConfig::indoor();
        let (lo, hi) = scene_bounds(&synth);
        let grid = VoxelGridSpec::covering(lo, hi, [0.2, 0.2, 0.2]).unwrap();
        RunConfig {
            seed: 0,
            model: ModelConfig {
                grid,
                num_classes: synth.classes.len(),
                point_features: 1,
                backbone: BackboneConfig {
                    sparse_channels: vec![16, 32, 32, 32],
                    sparse_strides: vec![1, 2, 1, 2],
                    dense_blocks: 1,
                    out_channels: 32,
                },
                decoder: DecoderConfig {
                    layers: 3,
                    heads: 4,
                    points: 4,
                    dim: 48,
                    ffn_dim: 96,
                    delta_scale: 0.5,
                    shared_heads: false,
                    counts: QueryCounts::uniform(32),
                },
            },
            train: TrainConfig { epochs: 20, lr_drop_epoch: 16, ..TrainConfig::default() },
            infer: InferConfig::indoor(),
            eval: EvalConfig { iou_thresholds: vec![0.25, 0.5], recall_points: 11, per_class: true },
            synth,
        }
    }

    /// Desk-scale outdoor preset.
    pub fn outdoor() -> Self {
        let synth = SynthConfig::outdoor();
        let (lo, hi) = scene_bounds(&synth);
        let grid = VoxelGridSpec::covering(lo, hi, [0.5, 0.5, 0.5]).unwrap();
        let mut r = RunConfig::indoor();
        r.model.grid = grid;
        r.model.num_classes = synth.classes.len();
        r.model.decoder.delta_scale = 3.0;
        r.model.decoder.counts = QueryCounts::uniform(64);
        r.train.epochs = 80;
        r.train.lr_drop_epoch = 64;
        r.train.gt_repeat = 5;
        r.train.weights.l1 = 5.0;
        r.train.augment = AugmentConfig { paste: 6, flip_y: true, rotate: std::f64::consts::FRAC_PI_8, scale: 0.05 };
        r.infer = InferConfig::outdoor();
        r.eval = EvalConfig { iou_thresholds: vec![0.7, 0.5], recall_points: 40, per_class: true };
        r.synth = synth;
        r
    }

    pub fn preset(kind: SceneKind) -> Self {
        match kind {
            SceneKind::Indoor => RunConfig::indoor(),
            SceneKind::Outdoor => RunConfig::outdoor(),
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.synth.class_names()
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.eval.validate()?;
        self.train.augment.validate()?;
        if self.model.num_classes != self.synth.classes.len() {
            return Err(Error::Config(format!(
                "model has {} classes but the dataset names {}",
                self.model.num_classes,
                self.synth.classes.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.infer.fusion_w) {
            return Err(Error::Config("fusion_w must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<toml::Value> {
        toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(v: toml::Value) -> Result<Self> {
        let r: RunConfig = v.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    /// Starts from the preset named by the file's `synth.kind` (indoor when
    /// absent), overlays the file, then the `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file: toml::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| Error::Parse {
                    path: p.display().to_string(),
                    position: span_of(&e, &text),
                    msg: e.message().to_string(),
                })?
            }
            None => toml::Value::Table(Default::default()),
        };
        let mut layer = file;
        for o in overrides {
            apply_override(&mut layer, o)?;
        }
        let kind = match layer.get("synth").and_then(|s| s.get("kind")).and_then(|k| k.as_str()) {
            Some("outdoor") => SceneKind::Outdoor,
            Some("indoor") | None => SceneKind::Indoor,
            Some(k) => return Err(Error::Config(format!("unknown scene kind {k:?}"))),
        };
        let mut base = RunConfig::preset(kind).to_toml()?;
        merge(&mut base, layer);
        RunConfig::from_toml(base)
    }
}

fn span_of(e: &toml::de::Error, text: &str) -> String {
    match e.span() {
        Some(s) => {
            let line = text[..s.start].matches('\n').count() + 1;
            let col = s.start - text[..s.start].rfind('\n').map_or(0, |i| i + 1) + 1;
            format!("line {line}, column {col}")
        }
        None => "unknown".into(),
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Applies `a.b.c=value`; the value is parsed as a TOML literal and falls
/// back to a bare string.
pub fn apply_override(root: &mut toml::Value, kv: &str) -> Result<()> {
    let (key, raw) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let t = cur.as_table_mut().ok_or_else(|| Error::Config(format!("override {key:?} descends into a non-table")))?;
        cur = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let t = cur.as_table_mut().ok_or_else(|| Error::Config(format!("override {key:?} descends into a non-table")))?;
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for r in [RunConfig::indoor(), RunConfig::outdoor()] {
            r.validate().unwrap();
            assert_eq!(RunConfig::from_toml(r.to_toml().unwrap()).unwrap(), r);
        }
    }

    #[test]
    fn overrides_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 3\n[train]\nepochs = 7\n").unwrap();
        let r = RunConfig::load(Some(&p), &["train.epochs=9".into(), "train.adam.lr=0.01".into()]).unwrap();
        assert_eq!((r.seed, r.train.epochs, r.train.adam.lr), (3, 9, 0.01));
        let o = RunConfig::load(None, &["synth.kind=outdoor".into()]).unwrap();
        assert_eq!(o, RunConfig::outdoor());
    }

    #[test]
    fn bad_toml_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "seed = 1\nseed = = 2\n").unwrap();
        let e = RunConfig::load(Some(&p), &[]).unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        assert!(RunConfig::load(None, &["nonsense".into()]).is_err());
    }
}
