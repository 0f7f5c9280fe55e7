use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;

use crate::error::{Error, Result};

/// `git describe --always --dirty` of the working directory, or `unknown`.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Flattens a TOML tree into dotted keys.
pub fn flatten_toml(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_toml(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Writes `key = value` lines, sorted by key.
pub fn write_manifest(path: &Path, entries: &BTreeMap<String, String>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for (k, v) in entries {
        writeln!(f, "{k} = {v}")?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once(" = ").ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            position: format!("line {}", i + 1),
            msg: "expected `key = value`".into(),
        })?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}
