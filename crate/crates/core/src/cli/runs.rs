//! Append-only run directories, their manifests, and prerequisite lookup.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{ExperimentConfig, StageTiming};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Top-level config keys that determine a trained classifier.
pub const MODEL_KEYS: &[&str] = &["seed", "data", "model"];
/// Top-level config keys that determine fitted detectors.
pub const DETECTOR_KEYS: &[&str] = &["seed", "data", "model", "attacks", "target", "detectors"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    /// Partial config hashes (`model`, `detectors`) that later commands
    /// match against when looking for prerequisites.
    pub stage_keys: BTreeMap<String, String>,
    pub started: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished: Option<String>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Files of the run directory, relative to it. On failure these are the
    /// partial outputs.
    pub artifacts: Vec<String>,
    /// Artifacts of earlier runs this one consumed.
    pub inputs: BTreeMap<String, PathBuf>,
    pub timings: Vec<StageTiming>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::FormatVersion { found: m.format_version, expected: MANIFEST_FORMAT_VERSION });
        }
        Ok(m)
    }
}

fn now() -> String {
    humantime::format_rfc3339_millis(SystemTime::now()).to_string()
}

/// A fresh directory `<out>/<command>-<hash12>[-N]` plus its manifest.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub manifest: RunManifest,
}

impl RunDir {
    /// Creates the directory, never reusing an existing one, and writes the
    /// effective config and a `running` manifest into it.
    pub fn create(out: &Path, command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let hash = cfg.hash();
        let stem = format!("{command}-{}", &hash[..12]);
        let mut n = 1;
        let path = loop {
            let name = if n == 1 { stem.clone() } else { format!("{stem}-{n}") };
            let p = out.join(name);
            match fs::create_dir(&p) {
                Ok(()) => break p,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
                Err(e) => return Err(Error::io(&p, e)),
            }
        };
        let mut stage_keys = BTreeMap::new();
        stage_keys.insert("model".to_string(), cfg.partial_hash(MODEL_KEYS));
        stage_keys.insert("detectors".to_string(), cfg.partial_hash(DETECTOR_KEYS));
        let run = RunDir {
            path,
            manifest: RunManifest {
                format_version: MANIFEST_FORMAT_VERSION,
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config_hash: hash,
                stage_keys,
                started: now(),
                finished: None,
                status: RunStatus::Running,
                error: None,
                artifacts: Vec::new(),
                inputs: BTreeMap::new(),
                timings: Vec::new(),
            },
        };
        run.write("config.toml", cfg.to_toml().as_bytes())?;
        run.save_manifest()?;
        Ok(run)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn save_manifest(&self) -> Result<()> {
        self.write_json(MANIFEST_FILE, &self.manifest)
    }

    /// Records the outcome, lists the directory's files and writes the
    /// final manifest.
    pub fn finish(mut self, outcome: &Result<()>) -> Result<PathBuf> {
        self.manifest.finished = Some(now());
        match outcome {
            Ok(()) => self.manifest.status = RunStatus::Complete,
            Err(e) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.error = Some(e.to_string());
            }
        }
        let mut names = Vec::new();
        for entry in fs::read_dir(&self.path).map_err(|e| Error::io(&self.path, e))? {
            let entry = entry.map_err(|e| Error::io(&self.path, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name != MANIFEST_FILE {
                names.push(name);
            }
        }
        names.sort();
        self.manifest.artifacts = names;
        self.save_manifest()?;
        Ok(self.path)
    }
}

fn suffix(name: &str) -> u64 {
    // `train-<hash12>` is run 1, `train-<hash12>-N` is run N
    name.rsplit_once('-').and_then(|(head, n)| head.contains('-').then(|| n.parse().ok()).flatten()).unwrap_or(1)
}

/// The most recently finished complete `command` run under `out` whose
/// stage key `key` equals `value`.
pub fn find_run(out: &Path, command: &str, key: &str, value: &str) -> Result<Option<PathBuf>> {
    let entries = match fs::read_dir(out) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(out, e)),
    };
    let prefix = format!("{command}-");
    let mut best: Option<(String, u64, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(out, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !name.starts_with(&prefix) || !entry.path().join(MANIFEST_FILE).is_file() {
            continue;
        }
        let Ok(m) = RunManifest::load(&entry.path()) else { continue };
        if m.status != RunStatus::Complete || m.stage_keys.get(key).map(String::as_str) != Some(value) {
            continue;
        }
        let rank = (m.finished.unwrap_or_default(), suffix(&name));
        if best.as_ref().is_none_or(|b| rank > (b.0.clone(), b.1)) {
            best = Some((rank.0, rank.1, entry.path()));
        }
    }
    Ok(best.map(|b| b.2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffix_parsing() {
        assert_eq!(suffix("train-0123456789ab"), 1);
        assert_eq!(suffix("train-0123456789ab-2"), 2);
        assert_eq!(suffix("train-0123456789ab-17"), 17);
    }
}
