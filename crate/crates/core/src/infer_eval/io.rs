use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom3d::Box3D;
use crate::pointops::{PointCloud, QueryKind};
use crate::train::GroundTruth;

use super::merge::Detection;

pub const UPC_MAGIC: &[u8; 4] = b"UPC1";
pub const UPC_VERSION: u32 = 1;

fn perr(path: &Path, position: String, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), position, msg: msg.into() }
}

pub fn encode_upc(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + cloud.len() * (3 + cloud.feat_dim) * 8);
    out.extend_from_slice(UPC_MAGIC);
    out.extend_from_slice(&UPC_VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    out.extend_from_slice(&(cloud.feat_dim as u32).to_le_bytes());
    for (i, p) in cloud.points.iter().enumerate() {
        for v in p.iter().chain(cloud.feature(i)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_upc(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let at = |o: usize| format!("byte {o}");
    if bytes.len() < 16 {
        return Err(perr(path, at(bytes.len()), "truncated header"));
    }
    if &bytes[..4] != UPC_MAGIC {
        return Err(perr(path, at(0), "bad magic, expected UPC1"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != UPC_VERSION {
        return Err(perr(path, at(4), format!("unsupported version {version}")));
    }
    let n = u32_at(8) as usize;
    let f = u32_at(12) as usize;
    let rec = 3 + f;
    let need = n.checked_mul(rec).and_then(|v| v.checked_mul(8)).and_then(|v| v.checked_add(16));
    match need {
        Some(need) if need == bytes.len() => {}
        Some(need) if need > bytes.len() => return Err(perr(path, at(bytes.len()), format!("truncated: expected {need} bytes"))),
        _ => return Err(perr(path, at(bytes.len()), "trailing bytes after last record")),
    }
    let mut points = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * f);
    for i in 0..n {
        let base = 16 + i * rec * 8;
        let mut row = Vec::with_capacity(rec);
        for k in 0..rec {
            let o = base + k * 8;
            let v = f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(perr(path, format!("byte {o} (point {i}, value {k})"), "non-finite value"));
            }
            row.push(v);
        }
        points.push([row[0], row[1], row[2]]);
        features.extend_from_slice(&row[3..]);
    }
    PointCloud::new(points, f, features)
}

/// Headerless little-endian `f32` stream of `(x, y, z, intensity)` records.
pub fn decode_raw_f32(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(perr(path, format!("byte {}", bytes.len() - bytes.len() % 16), "truncated record (need 4 f32 values)"));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut features = Vec::with_capacity(bytes.len() / 16);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let v: Vec<f64> = rec.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        if let Some(k) = v.iter().position(|x| !x.is_finite()) {
            return Err(perr(path, format!("byte {} (record {i})", i * 16 + k * 4), "non-finite value"));
        }
        points.push([v[0], v[1], v[2]]);
        features.push(v[3]);
    }
    PointCloud::new(points, 1, features)
}

pub fn encode_raw_f32(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points.iter().enumerate() {
        let inten = if cloud.feat_dim > 0 { cloud.feature(i)[0] } else { 0.0 };
        for v in [p[0], p[1], p[2], inten] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    Ok(fs::write(path, encode_upc(cloud))?)
}

/// Reads a `.upc` file, or a raw `f32` stream for any other extension
/// (`.bin` in KITTI layout).
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(UPC_MAGIC) || path.extension().is_some_and(|e| e == "upc") {
        decode_upc(&bytes, path)
    } else {
        decode_raw_f32(&bytes, path)
    }
}

/// `first` is the 1-based field number of `fields[0]` on the line.
fn parse_fields(path: &Path, line_no: usize, fields: &[&str], first: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let v: f64 =
                s.parse().map_err(|_| perr(path, format!("line {line_no}, field {}", k + first), format!("not a number: {s:?}")))?;
            if !v.is_finite() {
                return Err(perr(path, format!("line {line_no}, field {}", k + first), "non-finite value"));
            }
            Ok(v)
        })
        .collect()
}

fn class_index(path: &Path, line_no: usize, name: &str, classes: &[String]) -> Result<usize> {
    classes.iter().position(|c| c == name).ok_or_else(|| perr(path, format!("line {line_no}, field 1"), format!("unknown class {name:?}")))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

/// Parses `<class> cx cy cz w l h yaw` lines.
pub fn parse_labels(text: &str, classes: &[String], path: &Path) -> Result<Vec<GroundTruth>> {
    let mut out = Vec::new();
    for (ln, f) in content_lines(text) {
        if f.len() != 8 {
            return Err(perr(path, format!("line {ln}"), format!("expected 8 fields, found {}", f.len())));
        }
        let class_id = class_index(path, ln, f[0], classes)?;
        let v = parse_fields(path, ln, &f[1..], 2)?;
        let bx = Box3D::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6]).map_err(|e| perr(path, format!("line {ln}"), e.to_string()))?;
        out.push(GroundTruth { bx, class_id });
    }
    Ok(out)
}

pub fn format_labels(gts: &[GroundTruth], classes: &[String]) -> String {
    let mut s = String::new();
    for g in gts {
        let b = &g.bx;
        writeln!(s, "{} {} {} {} {} {} {} {}", classes[g.class_id], b.cx, b.cy, b.cz, b.w, b.l, b.h, b.yaw).unwrap();
    }
    s
}

pub fn read_labels(path: &Path, classes: &[String]) -> Result<Vec<GroundTruth>> {
    parse_labels(&fs::read_to_string(path)?, classes, path)
}

pub fn write_labels(path: &Path, gts: &[GroundTruth], classes: &[String]) -> Result<()> {
    Ok(fs::write(path, format_labels(gts, classes))?)
}

/// One detection per line:
/// `<scene-id> <class> cx cy cz w l h yaw p_hat pred_iou score source_set`.
pub fn format_detections(scene_id: &str, dets: &[Detection], classes: &[String]) -> String {
    let mut s = String::new();
    for d in dets {
        let b = &d.bx;
        writeln!(
            s,
            "{scene_id} {} {} {} {} {} {} {} {} {} {} {} {}",
            classes[d.class_id], b.cx, b.cy, b.cz, b.w, b.l, b.h, b.yaw, d.cls_prob, d.pred_iou, d.score, d.source_set
        )
        .unwrap();
    }
    s
}

/// Parses a detection file into `(scene-id, detection)` pairs in file order.
pub fn parse_detections(text: &str, classes: &[String], path: &Path) -> Result<Vec<(String, Detection)>> {
    let mut out = Vec::new();
    for (ln, f) in content_lines(text) {
        if f.len() != 13 {
            return Err(perr(path, format!("line {ln}"), format!("expected 13 fields, found {}", f.len())));
        }
        let class_id = class_index(path, ln, f[1], classes)?;
        let v = parse_fields(path, ln, &f[2..12], 3)?;
        let bx = Box3D::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6]).map_err(|e| perr(path, format!("line {ln}"), e.to_string()))?;
        let source_set: QueryKind =
            f[12].parse().map_err(|_| perr(path, format!("line {ln}, field 13"), format!("unknown query set {:?}", f[12])))?;
        out.push((f[0].to_string(), Detection { bx, class_id, cls_prob: v[7], pred_iou: v[8], score: v[9], source_set }));
    }
    Ok(out)
}
