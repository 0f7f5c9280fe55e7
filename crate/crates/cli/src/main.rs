use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use voxdet::audit::full_gradient_audit;
use voxdet::decoder::Detector;
use voxdet::diff::{read_checkpoint, write_checkpoint, ParamStore};
use voxdet::geom3d::iou_bench;
use voxdet::infer_eval::io::{format_detections, parse_detections, read_cloud, read_labels, write_cloud, write_labels};
use voxdet::infer_eval::{eval_ap, gen_synthetic, infer_scene, scene_seed, Detection, RunConfig, SceneSample};
use voxdet::train::{flatten_toml, git_describe, train_scenes, write_manifest, GroundTruth, ObjectBank};

const BANK_FILE: &str = "objects.bank";

#[derive(Parser)]
#[command(name = "voxdet", version, about = "Point-query 3D detection: data, training, inference and evaluation")]
struct Cli {
    /// Run configuration (TOML). Missing keys come from the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Indoor,
    Outdoor,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a dataset of `.upc` clouds, label files and an object bank.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train on a dataset directory; writes a checkpoint and run manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Detect objects in clouds (files or directories of `.upc`/`.bin`).
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Average precision of a detection file against a label directory.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Comma-separated IoU thresholds.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long)]
        recall_points: Option<usize>,
        /// Print one row per class.
        #[arg(long)]
        per_class: bool,
    },
    /// Geometry oracle suite with timing.
    IouBench {
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
    },
    /// Finite-difference audit of every gradient path.
    GradCheck,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Config from `--config`, else `fallback_dir/config.toml` when present,
/// then `extra` and `--set` overrides, then `--seed`.
fn load_config(cli: &Cli, fallback_dir: Option<&Path>, extra: &[String]) -> Result<RunConfig> {
    let path = cli.config.clone().or_else(|| {
        let p = fallback_dir?.join("config.toml");
        p.exists().then_some(p)
    });
    let mut ov = extra.to_vec();
    ov.extend(cli.overrides.iter().cloned());
    if let Some(s) = cli.seed {
        ov.push(format!("seed={s}"));
    }
    Ok(RunConfig::load(path.as_deref(), &ov)?)
}

fn write_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    let text = toml::to_string(cfg).context("serializing config")?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "upc" || e == "bin"))
        .collect();
    v.sort();
    Ok(v)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_dataset(dir: &Path, classes: &[String]) -> Result<Vec<(String, SceneSample)>> {
    let files = scene_files(dir)?;
    if files.is_empty() {
        bail!("no point clouds in {}", dir.display());
    }
    files
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let cloud = read_cloud(f)?;
            let gts = read_labels(&f.with_extension("txt"), classes)?;
            Ok((stem(f), SceneSample { cloud, gts, kind: voxdet::infer_eval::SceneKind::Indoor, seed: 0, index: i }))
        })
        .collect()
}

fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<(Detector, ParamStore)> {
    let (det, mut store) = voxdet::infer_eval::build_model(cfg, cfg.seed)?;
    let mut f = fs::File::open(ckpt).with_context(|| format!("opening {}", ckpt.display()))?;
    let entries = read_checkpoint(&mut f)?;
    store.load_values(&entries)?;
    Ok((det, store))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData { out, kind, scenes } => {
            let mut extra = Vec::new();
            if let Some(k) = kind {
                extra.push(format!("synth.kind={}", if matches!(k, Kind::Outdoor) { "outdoor" } else { "indoor" }));
            }
            if let Some(n) = scenes {
                extra.push(format!("synth.num_scenes={n}"));
            }
            let cfg = load_config(&cli, None, &extra)?;
            fs::create_dir_all(out)?;
            let t = Instant::now();
            let data = gen_synthetic(&cfg.synth, cfg.seed)?;
            let classes = cfg.class_names();
            for s in &data {
                let base = out.join(format!("scene_{:04}", s.index));
                write_cloud(&base.with_extension("upc"), &s.cloud)?;
                write_labels(&base.with_extension("txt"), &s.gts, &classes)?;
            }
            let bank = ObjectBank::from_scenes(data.iter().map(|s| (&s.cloud, s.gts.as_slice())));
            bank.write(&out.join(BANK_FILE))?;
            write_config(&out.join("config.toml"), &cfg)?;
            println!("wrote {} scenes to {} in {:.1}s", data.len(), out.display(), t.elapsed().as_secs_f64());
        }
        Cmd::Train { data, out, epochs, lr } => {
            let mut extra = Vec::new();
            if let Some(e) = epochs {
                extra.push(format!("train.epochs={e}"));
            }
            if let Some(l) = lr {
                extra.push(format!("train.adam.lr={l}"));
            }
            let cfg = load_config(&cli, Some(data), &extra)?;
            let scenes = load_dataset(data, &cfg.class_names())?;
            let (det, mut store) = voxdet::infer_eval::build_model(&cfg, cfg.seed)?;
            let raw: Vec<_> = scenes.into_iter().map(|(_, s)| (s.cloud, s.gts)).collect();
            let bank_path = data.join(BANK_FILE);
            let bank = if cfg.train.augment.paste > 0 && bank_path.exists() { Some(ObjectBank::read(&bank_path)?) } else { None };
            let t = Instant::now();
            let hist = train_scenes(&det, &mut store, &raw, bank.as_ref(), &cfg.train, cfg.seed)?;
            fs::create_dir_all(out)?;
            let ckpt = out.join("model.udck");
            let mut w = BufWriter::new(fs::File::create(&ckpt)?);
            write_checkpoint(&store, &mut w)?;
            drop(w);
            write_config(&out.join("config.toml"), &cfg)?;
            let mut m = BTreeMap::new();
            flatten_toml("", &cfg.to_toml()?, &mut m);
            m.insert("run.git_describe".into(), git_describe());
            m.insert("run.data_dir".into(), data.display().to_string());
            m.insert("run.train_scenes".into(), raw.len().to_string());
            m.insert(
                "run.object_bank".into(),
                bank.as_ref().map_or("none".into(), |b| format!("{} ({} objects)", bank_path.display(), b.objects.len())),
            );
            m.insert("run.final_loss".into(), hist.last().map_or("nan".into(), |l| l.to_string()));
            m.insert("run.train_seconds".into(), format!("{:.1}", t.elapsed().as_secs_f64()));
            write_manifest(&out.join("run.manifest"), &m)?;
            println!("trained {} epochs on {} scenes; checkpoint {}", hist.len(), raw.len(), ckpt.display());
        }
        Cmd::Infer { checkpoint, out, inputs } => {
            let cfg = load_config(&cli, checkpoint.parent(), &[])?;
            let (det, store) = load_model(&cfg, checkpoint)?;
            let mut files = Vec::new();
            for p in inputs {
                if p.is_dir() {
                    files.extend(scene_files(p)?);
                } else {
                    files.push(p.clone());
                }
            }
            let classes = cfg.class_names();
            let mut text = String::new();
            let mut n = 0;
            for (i, f) in files.iter().enumerate() {
                let cloud = read_cloud(f)?;
                let dets = infer_scene(&det, &store, &det.prepare(&cloud), &cfg.infer, scene_seed(cfg.seed, i))?;
                n += dets.len();
                text.push_str(&format_detections(&stem(f), &dets, &classes));
            }
            fs::write(out, text)?;
            println!("{n} detections from {} clouds written to {}", files.len(), out.display());
        }
        Cmd::Eval { detections, labels, thresholds, recall_points, per_class } => {
            let mut cfg = load_config(&cli, Some(labels), &[])?;
            if let Some(t) = thresholds {
                cfg.eval.iou_thresholds = t.clone();
            }
            if let Some(r) = recall_points {
                cfg.eval.recall_points = *r;
            }
            let classes = cfg.class_names();
            let text = fs::read_to_string(detections)?;
            let parsed = parse_detections(&text, &classes, detections)?;
            let mut ids: Vec<PathBuf> = fs::read_dir(labels)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "txt"))
                .collect();
            ids.sort();
            let mut gts: Vec<Vec<GroundTruth>> = Vec::new();
            let mut dets: Vec<Vec<Detection>> = Vec::new();
            for p in &ids {
                gts.push(read_labels(p, &classes)?);
                let id = stem(p);
                dets.push(parsed.iter().filter(|(s, _)| *s == id).map(|(_, d)| d.clone()).collect());
            }
            let known: std::collections::BTreeSet<String> = ids.iter().map(|p| stem(p)).collect();
            if let Some((s, _)) = parsed.iter().find(|(s, _)| !known.contains(s)) {
                bail!("detections reference scene {s:?} with no label file in {}", labels.display());
            }
            let res = eval_ap(&dets, &gts, classes.len(), &cfg.eval)?;
            print!("{:<12}", "class");
            for r in &res {
                print!(" {:>9}", format!("AP@{:.2}", r.iou_thresh));
            }
            println!();
            if *per_class || cfg.eval.per_class {
                for (c, name) in classes.iter().enumerate() {
                    print!("{name:<12}");
                    for r in &res {
                        match r.per_class[c] {
                            Some(ap) => print!(" {:>9.2}", ap * 100.0),
                            None => print!(" {:>9}", "-"),
                        }
                    }
                    println!();
                }
            }
            print!("{:<12}", "mAP");
            for r in &res {
                print!(" {:>9.2}", r.map * 100.0);
            }
            println!();
            println!("({} scenes, {}-point interpolation)", ids.len(), cfg.eval.recall_points);
        }
        Cmd::IouBench { pairs, samples } => {
            let r = iou_bench(*pairs, *samples, cli.seed.unwrap_or(0));
            println!("pairs                       {}", r.pairs);
            println!("max |exact - monte carlo|   {:.3e}  (area, {} samples)", r.max_mc_abs_err, samples);
            println!("max axis-aligned error      {:.3e}", r.max_axis_aligned_err);
            println!("max decoupled identity err  {:.3e}", r.max_identity_err);
            println!("exact iou_3d throughput     {:.0}/s", r.iou_per_sec);
            println!("total                       {:.2}s", r.seconds);
        }
        Cmd::GradCheck => {
            let s = full_gradient_audit(cli.seed.unwrap_or(0))?;
            for e in &s.entries {
                println!(
                    "{:<32} max rel err {:.2e}  tol {:.0e}  {}",
                    e.name,
                    e.report.max_rel_err,
                    e.tol,
                    if e.passed() { "ok" } else { "FAIL" }
                );
            }
            println!("flagged clipping-discontinuity probes: {}", s.flagged);
            if !s.passed() {
                bail!("gradient audit failed");
            }
        }
    }
    Ok(())
}
