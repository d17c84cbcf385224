//! Results-directory manifest: content hashes of every output file, the
//! configuration hash and seeds of each stage that wrote into the directory,
//! and the toolkit version. No timestamps, so reruns reproduce it exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a parameter set's canonical JSON form.
pub fn config_hash(params: &impl Serialize) -> String {
    sha256_hex(&serde_json::to_vec(params).expect("parameters serialize"))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Input files by path as given, with their content hashes.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run: usize,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub toolkit_version: String,
    pub stages: BTreeMap<String, StageRecord>,
    pub runs: Vec<RunStatus>,
    /// Output path relative to the results root, `/`-separated, to sha256.
    pub files: BTreeMap<String, String>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            manifest_version: MANIFEST_VERSION,
            toolkit_version: TOOLKIT_VERSION.to_string(),
            stages: BTreeMap::new(),
            runs: Vec::new(),
            files: BTreeMap::new(),
        }
    }
}

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The existing manifest of `dir`, or an empty one.
    pub fn load_or_new(dir: impl AsRef<Path>) -> Result<Self> {
        if dir.as_ref().join(MANIFEST_FILE).exists() {
            Self::load(dir)
        } else {
            Ok(Manifest::default())
        }
    }

    pub fn record_stage(
        &mut self,
        stage: &str,
        params: &impl Serialize,
        seeds: Vec<u64>,
        inputs: &[&Path],
    ) -> Result<()> {
        let inputs = inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), hash_file(p)?)))
            .collect::<Result<_>>()?;
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                config_hash: config_hash(params),
                seeds,
                inputs,
            },
        );
        Ok(())
    }

    /// Writes `content` to `dir/rel`, creating parents, and records its hash.
    pub fn write(&mut self, dir: impl AsRef<Path>, rel: &str, content: &[u8]) -> Result<PathBuf> {
        let path = dir.as_ref().join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        self.files.insert(rel.to_string(), sha256_hex(content));
        Ok(path)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    Missing,
    Changed,
    /// Present on disk but not listed.
    Unlisted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Drift {
    pub path: String,
    pub kind: DriftKind,
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            walk(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walk stays under root");
            let rel = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            if rel != MANIFEST_FILE {
                out.push(rel);
            }
        }
    }
    Ok(())
}

/// Re-hashes every listed file and reports drift; an empty result means the
/// directory matches its manifest.
pub fn verify(dir: impl AsRef<Path>) -> Result<Vec<Drift>> {
    let dir = dir.as_ref();
    let manifest = Manifest::load(dir)?;
    let mut drift = Vec::new();
    for (rel, expected) in &manifest.files {
        let path = dir.join(rel);
        if !path.is_file() {
            drift.push(Drift {
                path: rel.clone(),
                kind: DriftKind::Missing,
            });
        } else if &hash_file(&path)? != expected {
            drift.push(Drift {
                path: rel.clone(),
                kind: DriftKind::Changed,
            });
        }
    }
    let mut on_disk = Vec::new();
    walk(dir, dir, &mut on_disk)?;
    for rel in on_disk {
        if !manifest.files.contains_key(&rel) {
            drift.push(Drift {
                path: rel,
                kind: DriftKind::Unlisted,
            });
        }
    }
    Ok(drift)
}
