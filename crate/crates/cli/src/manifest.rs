//! Append-only `manifest.jsonl` run records with SHA-256 file pins.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn unix_time() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// One manifest line, built up while a stage runs.
pub struct Entry {
    stage: &'static str,
    started: f64,
    seeds: Vec<u64>,
    params: Map<String, Value>,
    inputs: Vec<(PathBuf, String)>,
    outputs: Vec<(PathBuf, String)>,
}

impl Entry {
    pub fn new(stage: &'static str) -> Self {
        Self {
            stage,
            started: unix_time(),
            seeds: Vec::new(),
            params: Map::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seeds.push(seed);
        self
    }

    pub fn param(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    /// Record a consumed file. If the directory holding it has a manifest
    /// that pins the file, the current contents must match the pin.
    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let hash = hash_file(path)?;
        if let Some(pinned) = pinned_hash(path)? {
            if pinned != hash {
                return Err(CliError::Runtime(format!(
                    "{} does not match the hash recorded in its manifest",
                    path.display()
                )));
            }
        } else {
            log::warn!("{} is not pinned by any manifest", path.display());
        }
        self.inputs.push((path.to_path_buf(), hash));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        let hash = hash_file(path)?;
        self.outputs.push((path.to_path_buf(), hash));
        Ok(())
    }

    /// Append this entry to `dir/manifest.jsonl`.
    pub fn append(&self, dir: &Path) -> Result<(), CliError> {
        let files = |list: &[(PathBuf, String)]| -> Vec<Value> {
            list.iter()
                .map(|(p, h)| json!({ "path": display_path(dir, p), "sha256": h }))
                .collect()
        };
        let line = json!({
            "stage": self.stage,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "command_line": std::env::args().collect::<Vec<_>>(),
            "seeds": self.seeds,
            "params": Value::Object(self.params.clone()),
            "inputs": files(&self.inputs),
            "outputs": files(&self.outputs),
            "started_unix": self.started,
            "finished_unix": unix_time(),
        });
        let path = dir.join(MANIFEST_FILE);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::io(&path, e))?;
        writeln!(file, "{line}").map_err(|e| CliError::io(&path, e))
    }
}

/// Every entry of a manifest, oldest first. A missing file is empty.
pub fn read_entries(dir: &Path) -> Result<Vec<Value>, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(CliError::io(&path, e)),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                CliError::Runtime(format!("{} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

/// `path` relative to `dir` when it lies inside it, otherwise absolute.
fn display_path(dir: &Path, path: &Path) -> String {
    let abs = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
    match dir.canonicalize() {
        Ok(d) => abs.strip_prefix(&d).unwrap_or(&abs).display().to_string(),
        Err(_) => abs.display().to_string(),
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

/// Most recent hash recorded for `path` as an output by a manifest in its
/// directory or the one above (snapshots live one level down).
fn pinned_hash(path: &Path) -> Result<Option<String>, CliError> {
    for dir in path.ancestors().skip(1).take(2) {
        let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
        let mut found = None;
        for entry in read_entries(dir)? {
            let Some(outputs) = entry["outputs"].as_array() else {
                continue;
            };
            for out in outputs {
                if let (Some(p), Some(h)) = (out["path"].as_str(), out["sha256"].as_str()) {
                    if same_file(&dir.join(p), path) {
                        found = Some(h.to_string());
                    }
                }
            }
        }
        if found.is_some() {
            return Ok(found);
        }
    }
    Ok(None)
}

/// Latest value of `params[key]` recorded by `stage` in `dir`'s manifest.
pub fn lookup_param(dir: &Path, stage: &str, key: &str) -> Result<Option<String>, CliError> {
    Ok(read_entries(dir)?
        .iter()
        .rev()
        .filter(|e| e["stage"] == stage)
        .find_map(|e| e["params"][key].as_str().map(str::to_string)))
}
