//! Run directories and their manifests.
//!
//! A run lives at `<root>/<command>-<name>-<hash>`, where the hash covers the
//! command, the resolved configuration and the content of every input. The
//! manifest is written last, so a directory without one is an interrupted
//! run. Finished runs are never written to again.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use querytune::data::TaskKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const RUNS_ENV: &str = "QUERYTUNE_RUNS";
pub const MANIFEST: &str = "manifest.json";

pub fn runs_root(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(RUNS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

/// Hash of every file under `dir`, by relative path, in sorted order.
pub fn hash_dir(dir: &Path) -> Result<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
        for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                let rel = path.strip_prefix(base).expect("under base").to_string_lossy().replace('\\', "/");
                out.push((rel, path));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, path) in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(hash_file(&path)?.as_bytes());
        h.update([0]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// What a training run saw, so later evaluation can refuse leaked splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingScope {
    pub datasets: Vec<String>,
    pub tasks: Vec<TaskKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub output_dir: String,
    pub input_hash: String,
    /// Files or directories the run read. Paths are as given.
    pub inputs: Vec<Artifact>,
    /// Files the run wrote, relative to `output_dir`.
    pub artifacts: Vec<Artifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingScope>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("no manifest at {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", path.display()))
    }

    pub fn input(&self, name_suffix: &str) -> Option<&Artifact> {
        self.inputs.iter().find(|a| a.path.ends_with(name_suffix))
    }
}

/// Hash identifying a run: the command, its resolved config, extra
/// command-specific keys and its inputs' content hashes.
pub fn input_hash(command: &str, config: &ExperimentConfig, extra: &[(&str, String)], inputs: &[Artifact]) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0]);
    h.update(config.to_toml().as_bytes());
    for (k, v) in extra {
        h.update([0]);
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
    }
    for a in inputs {
        h.update([0]);
        h.update(a.sha256.as_bytes());
    }
    hex::encode(h.finalize())
}

pub enum RunDir {
    /// Fresh, empty directory to write into.
    Fresh(PathBuf),
    /// An identical run already finished here.
    Done(PathBuf),
}

pub fn open_run(root: &Path, command: &str, name: &str, hash: &str) -> Result<RunDir> {
    let dir = root.join(format!("{command}-{name}-{}", &hash[..12]));
    if dir.join(MANIFEST).exists() {
        let m = RunManifest::load(&dir)?;
        if m.input_hash != hash {
            bail!("{} holds a different run (hash {}); refusing to overwrite", dir.display(), m.input_hash);
        }
        return Ok(RunDir::Done(dir));
    }
    if dir.exists() {
        bail!("{} exists without a manifest (interrupted run?); remove it to retry", dir.display());
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(RunDir::Fresh(dir))
}

/// Writes a new file in the run directory and records it.
pub struct Writer {
    pub dir: PathBuf,
    pub artifacts: Vec<Artifact>,
}

impl Writer {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir, artifacts: Vec::new() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if path.exists() {
            bail!("{} already exists; refusing to overwrite", path.display());
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record(rel)?;
        Ok(path)
    }

    /// Records a file some other routine already wrote.
    pub fn record(&mut self, rel: &str) -> Result<()> {
        let path = self.dir.join(rel);
        if !path.is_file() {
            return Err(anyhow!("artifact {} was not written", path.display()));
        }
        self.artifacts.push(Artifact { path: rel.to_string(), sha256: hash_file(&path)? });
        Ok(())
    }

    pub fn finish(self, mut manifest: RunManifest) -> Result<PathBuf> {
        manifest.output_dir = self.dir.display().to_string();
        manifest.artifacts = self.artifacts;
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(self.dir.join(MANIFEST), text)?;
        Ok(self.dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finished_runs_are_reused_and_never_rewritten() {
        let root = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let hash = input_hash("stats", &cfg, &[], &[]);
        let RunDir::Fresh(dir) = open_run(root.path(), "stats", "x", &hash).unwrap() else { panic!("fresh expected") };
        let mut w = Writer::new(dir.clone());
        w.write("a.txt", b"one").unwrap();
        assert!(w.write("a.txt", b"two").is_err());
        let manifest = RunManifest {
            command: "stats".into(),
            config_path: None,
            config: cfg.clone(),
            seed: 0,
            output_dir: String::new(),
            input_hash: hash.clone(),
            inputs: vec![],
            artifacts: vec![],
            training: None,
        };
        w.finish(manifest).unwrap();
        assert!(matches!(open_run(root.path(), "stats", "x", &hash).unwrap(), RunDir::Done(_)));
        assert_eq!(fs::read(dir.join("a.txt")).unwrap(), b"one");

        let other = input_hash("stats", &cfg, &[("k", "v".into())], &[]);
        assert_ne!(other, hash);
        let RunDir::Fresh(half) = open_run(root.path(), "stats", "x", &other).unwrap() else { panic!() };
        assert!(open_run(root.path(), "stats", "x", &other).is_err(), "{} has no manifest", half.display());
    }

    #[test]
    fn directory_hash_sees_content_and_names() {
        let d = tempfile::tempdir().unwrap();
        fs::create_dir(d.path().join("sub")).unwrap();
        fs::write(d.path().join("sub/a"), "1").unwrap();
        let h1 = hash_dir(d.path()).unwrap();
        fs::write(d.path().join("sub/a"), "2").unwrap();
        let h2 = hash_dir(d.path()).unwrap();
        fs::rename(d.path().join("sub/a"), d.path().join("sub/b")).unwrap();
        let h3 = hash_dir(d.path()).unwrap();
        assert!(h1 != h2 && h2 != h3 && h1 != h3);
    }
}
