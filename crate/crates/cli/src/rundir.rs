//! Run directories: a config snapshot, a completion stamp and the outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use talkmem::storage;
use talkmem::{Error, Result};

use crate::config::RunConfig;

pub const STAMP: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub command: String,
    pub config_hash: String,
    /// `(name, content hash)` for every input directory.
    pub inputs: Vec<(String, String)>,
    /// Content hash of the run directory minus the stamp, once complete.
    pub outputs: Option<String>,
}

/// SHA-256 over relative paths and contents of every file under `dir`.
pub fn dir_hash(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    files.sort();
    let mut buf = Vec::new();
    for rel in files {
        if rel == STAMP {
            continue;
        }
        let bytes = fs::read(dir.join(&rel)).map_err(|e| Error::io(dir.join(&rel), e))?;
        buf.extend_from_slice(rel.as_bytes());
        buf.push(0);
        buf.extend_from_slice(storage::sha256_hex(&bytes).as_bytes());
        buf.push(b'\n');
    }
    Ok(storage::sha256_hex(&buf))
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

pub struct RunDir {
    pub path: PathBuf,
    stamp: Stamp,
}

pub enum Prepared {
    Fresh(RunDir),
    UpToDate(PathBuf),
}

/// Check inputs, detect completed work and write the config snapshot.
pub fn prepare(path: &Path, command: &str, cfg: &RunConfig, inputs: &[(&str, &Path)]) -> Result<Prepared> {
    let out = absolute(path);
    let mut hashed = Vec::new();
    for (name, p) in inputs {
        if !p.is_dir() {
            return Err(Error::argument(format!("{name} directory {} does not exist", p.display())));
        }
        let abs = absolute(p);
        if abs.starts_with(&out) || out.starts_with(&abs) {
            return Err(Error::argument(format!(
                "output {} overlaps input {}",
                out.display(),
                abs.display()
            )));
        }
        hashed.push((name.to_string(), dir_hash(p)?));
    }
    let stamp = Stamp {
        command: command.into(),
        config_hash: storage::json_hash(cfg),
        inputs: hashed,
        outputs: None,
    };
    if let Ok(prev) = storage::read_json::<Stamp>(&path.join(STAMP)) {
        let same = prev.command == stamp.command && prev.config_hash == stamp.config_hash && prev.inputs == stamp.inputs;
        if same && prev.outputs.as_deref() == Some(dir_hash(path)?.as_str()) {
            return Ok(Prepared::UpToDate(path.to_path_buf()));
        }
    }
    storage::ensure_dir(path)?;
    let _ = fs::remove_file(path.join(STAMP));
    fs::write(path.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(path.join("config.toml"), e))?;
    Ok(Prepared::Fresh(RunDir {
        path: path.to_path_buf(),
        stamp,
    }))
}

fn absolute(p: &Path) -> PathBuf {
    let abs = std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    // resolve `..` without requiring the path to exist
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            std::path::Component::ParentDir => {
                out.pop();
            }
            std::path::Component::CurDir => {}
            c => out.push(c),
        }
    }
    out
}

impl RunDir {
    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    }

    /// Mark the run complete.
    pub fn finish(mut self) -> Result<PathBuf> {
        self.stamp.outputs = Some(dir_hash(&self.path)?);
        storage::write_json(&self.path.join(STAMP), &self.stamp)?;
        Ok(self.path)
    }
}
