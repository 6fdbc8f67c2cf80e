//! Run manifests and all-or-nothing output directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: Option<u64>,
    pub config: RunConfig,
    /// Path to hex sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Files written into one output directory. Unless [`Outputs::finish`]
/// runs, everything written is removed again on drop, together with the
/// directory if this run created it.
pub struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    written: Vec<(PathBuf, String)>,
    committed: bool,
    started: Instant,
}

impl Outputs {
    pub fn begin(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            written: Vec::new(),
            committed: false,
            started: Instant::now(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        // Register first so a failed write is also cleaned up.
        self.written.push((path.clone(), hex::encode(Sha256::digest(bytes))));
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Writes the manifest and keeps every output.
    pub fn finish(
        mut self,
        command: &str,
        seed: Option<u64>,
        config: &RunConfig,
        inputs: &[&Path],
    ) -> Result<PathBuf> {
        let mut digests = BTreeMap::new();
        for p in inputs {
            digests.insert(p.display().to_string(), sha256_file(p)?);
        }
        let manifest = RunManifest {
            tool: "gridhealth",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            config: config.clone(),
            inputs: digests,
            outputs: self
                .written
                .iter()
                .map(|(p, d)| (p.display().to_string(), d.clone()))
                .collect(),
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        let path = self.write(MANIFEST_FILE, json.as_bytes())?;
        self.committed = true;
        Ok(path)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for (p, _) in &self.written {
            let _ = fs::remove_file(p);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_outputs_are_removed() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        {
            let mut out = Outputs::begin(&dir).unwrap();
            out.write("a.csv", b"x\n").unwrap();
            assert!(dir.join("a.csv").exists());
        }
        assert!(!dir.exists());
    }

    #[test]
    fn preexisting_files_survive_a_failed_run() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("keep.txt"), "k").unwrap();
        {
            let mut out = Outputs::begin(tmp.path()).unwrap();
            out.write("a.csv", b"x\n").unwrap();
        }
        assert!(tmp.path().join("keep.txt").exists());
        assert!(!tmp.path().join("a.csv").exists());
    }

    #[test]
    fn finished_runs_record_digests() {
        let tmp = tempfile::tempdir().unwrap();
        let input = tmp.path().join("in.csv");
        fs::write(&input, "abc").unwrap();
        let mut out = Outputs::begin(&tmp.path().join("o")).unwrap();
        out.write("r.csv", b"abc").unwrap();
        let m = out.finish("test", Some(3), &RunConfig::default(), &[&input]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(m).unwrap()).unwrap();
        let abc = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad";
        assert_eq!(v["inputs"][input.display().to_string()], abc);
        assert_eq!(v["seed"], 3);
        assert!(v["outputs"].as_object().unwrap().values().any(|d| d == abc));
    }
}
