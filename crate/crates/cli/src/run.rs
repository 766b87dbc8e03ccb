//! Run directories: `out/<run_id>/{models,reports,plots}` plus a manifest.
//!
//! A run is assembled in a hidden staging directory and renamed into place
//! only when every artifact has been written, so a failed run leaves nothing
//! behind.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{invalid, io_err, Result};

pub const MANIFEST_SCHEMA: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Wall-clock timings; the one file that differs between identical runs.
pub const TIMINGS_FILE: &str = "timings.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Run this one was derived from (transfer runs name their source run).
    pub source_run: Option<String>,
    pub config: PipelineConfig,
    /// SHA-256 of every artifact except the manifest and timings, by relative path.
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let m: Self = soh_core::read_json(&run_dir.join(MANIFEST_FILE))?;
        if m.schema_version != MANIFEST_SCHEMA {
            return Err(invalid(format!(
                "run manifest schema {} is not supported",
                m.schema_version
            )));
        }
        Ok(m)
    }
}

pub fn default_run_id(command: &str, config_hash: &str, seeds: &[u64]) -> String {
    let seeds: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
    format!("{command}-{}-seed{}", &config_hash[..12], seeds.join("_"))
}

/// SHA-256 of the parts joined by newlines.
pub fn combined_hash(parts: &[&str]) -> String {
    hex::encode(Sha256::digest(parts.join("\n").as_bytes()))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Relative paths (with `/` separators) of every file under `root`, sorted.
pub fn list_files(root: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io_err(dir))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("under root");
                out.push(
                    rel.components()
                        .map(|c| c.as_os_str().to_string_lossy())
                        .collect::<Vec<_>>()
                        .join("/"),
                );
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

pub struct RunDir {
    pub run_id: String,
    target: PathBuf,
    staging: PathBuf,
    done: bool,
}

impl RunDir {
    pub fn create(out_dir: &Path, run_id: &str) -> Result<Self> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
            return Err(invalid(format!("invalid run id {run_id:?}")));
        }
        let staging = out_dir.join(format!(".{run_id}.partial"));
        if staging.exists() {
            std::fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
        }
        for sub in ["models", "reports", "plots"] {
            let d = staging.join(sub);
            std::fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        Ok(Self {
            run_id: run_id.to_string(),
            target: out_dir.join(run_id),
            staging,
            done: false,
        })
    }

    /// Where artifacts are written until [`RunDir::commit`].
    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn models(&self) -> PathBuf {
        self.staging.join("models")
    }

    pub fn reports(&self) -> PathBuf {
        self.staging.join("reports")
    }

    pub fn plots(&self) -> PathBuf {
        self.staging.join("plots")
    }

    /// Hashes the artifacts, writes the manifest and moves the run into
    /// place, replacing an earlier run with the same id.
    pub fn commit(mut self, mut manifest: RunManifest) -> Result<PathBuf> {
        manifest.run_id = self.run_id.clone();
        manifest.files.clear();
        for rel in list_files(&self.staging)? {
            if rel == MANIFEST_FILE || rel == TIMINGS_FILE {
                continue;
            }
            manifest
                .files
                .insert(rel.clone(), sha256_file(&self.staging.join(&rel))?);
        }
        soh_core::write_json(&self.staging.join(MANIFEST_FILE), &manifest)?;
        if self.target.exists() {
            std::fs::remove_dir_all(&self.target).map_err(io_err(&self.target))?;
        }
        std::fs::rename(&self.staging, &self.target).map_err(io_err(&self.target))?;
        self.done = true;
        Ok(self.target.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.done {
            let _ = std::fs::remove_dir_all(&self.staging);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> RunManifest {
        RunManifest {
            schema_version: MANIFEST_SCHEMA,
            run_id: String::new(),
            command: "test".into(),
            config_hash: "0".repeat(64),
            seeds: vec![1],
            source_run: None,
            config: PipelineConfig::default(),
            files: BTreeMap::new(),
        }
    }

    #[test]
    fn commit_moves_and_hashes() {
        let out = tempfile::tempdir().unwrap();
        let run = RunDir::create(out.path(), "r1").unwrap();
        std::fs::write(run.reports().join("a.json"), "{}").unwrap();
        std::fs::write(run.path().join(TIMINGS_FILE), "{}").unwrap();
        let dir = run.commit(manifest()).unwrap();
        let m = RunManifest::load(&dir).unwrap();
        assert_eq!(m.run_id, "r1");
        assert_eq!(m.files.keys().collect::<Vec<_>>(), vec!["reports/a.json"]);
        assert!(!out.path().join(".r1.partial").exists());
    }

    #[test]
    fn dropped_run_leaves_nothing() {
        let out = tempfile::tempdir().unwrap();
        {
            let run = RunDir::create(out.path(), "r2").unwrap();
            std::fs::write(run.models().join("x"), "1").unwrap();
        }
        assert_eq!(std::fs::read_dir(out.path()).unwrap().count(), 0);
        assert!(RunDir::create(out.path(), "../x").is_err());
    }

    #[test]
    fn run_ids_are_stable() {
        let id = default_run_id("fit-source", &"ab".repeat(32), &[1, 2]);
        assert_eq!(id, "fit-source-abababababab-seed1_2");
    }
}
