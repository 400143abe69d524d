//! Work directory: artifact paths, the hash manifest, staleness checks and
//! the advisory lock.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const COLLECTION: &str = "collection.jsonl";
pub const SESSIONS: &str = "sessions.jsonl";
pub const QRELS: &str = "qrels.txt";
pub const SPLIT: &str = "split.json";
pub const EMBEDDINGS: &str = "embeddings.bin";
pub const INDEX: &str = "index.bin";
pub const PRJ: &str = "prj.tsv";
pub const REFORMULATED: &str = "reformulated.jsonl";
pub const INSTANCES: &str = "instances.jsonl";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const MANIFEST: &str = "manifest.json";
const LOCK: &str = ".lock";

pub fn run_artifact(name: &str) -> String {
    format!("runs/{name}.trec")
}

/// Command that produces a work-directory artifact, for error messages.
fn producer_hint(artifact: &str) -> &'static str {
    match artifact {
        COLLECTION | SESSIONS | QRELS | SPLIT => "ingest",
        EMBEDDINGS => "embed",
        INDEX => "index",
        PRJ => "prj",
        REFORMULATED => "reformulate",
        INSTANCES => "mine",
        CHECKPOINT | TRAIN_LOG => "train",
        a if a.starts_with("runs/") => "search",
        _ => "the producing command",
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = BufReader::new(File::open(path).map_err(|e| CliError::io(format!("opening {}", path.display()), e))?);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn sha256_str(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub config_hash: String,
    /// Work-directory-relative names, or absolute paths for external inputs.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub steps: BTreeMap<String, StepRecord>,
}

impl Manifest {
    fn producer_of(&self, artifact: &str) -> Option<(&str, &StepRecord)> {
        self.steps
            .iter()
            .find(|(_, r)| r.outputs.contains_key(artifact))
            .map(|(s, r)| (s.as_str(), r))
    }
}

/// An open, locked work directory.
pub struct WorkDir {
    root: PathBuf,
    manifest: Manifest,
    force: bool,
}

impl WorkDir {
    pub fn open(root: &Path, force: bool) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(format!("creating {}", root.display()), e))?;
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::Locked(format!(
                    "work directory {} is in use by another command (lock file {}); delete the lock if no other histdr process is running",
                    root.display(),
                    lock.display()
                )))
            }
            Err(e) => return Err(CliError::io(format!("creating {}", lock.display()), e)),
        }
        let manifest_path = root.join(MANIFEST);
        let manifest = if manifest_path.exists() {
            let text = fs::read_to_string(&manifest_path)
                .map_err(|e| CliError::io(format!("reading {}", manifest_path.display()), e))?;
            serde_json::from_str(&text).map_err(|e| {
                histdr::Error::Validation(format!("corrupt manifest {}: {e}", manifest_path.display()))
            })?
        } else {
            Manifest::default()
        };
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            force,
        })
    }

    pub fn path(&self, artifact: &str) -> PathBuf {
        self.root.join(artifact)
    }

    /// Path of an upstream artifact after checking that it exists and that
    /// neither it nor anything it was derived from changed since it was written.
    /// `--force` skips the freshness check but not the existence check.
    pub fn input(&self, artifact: &str, config_hash_of: &dyn Fn(&str) -> String) -> CliResult<PathBuf> {
        let path = self.path(artifact);
        if !path.exists() {
            return Err(histdr::Error::MissingArtifact(format!(
                "{} (run `histdr {}` first)",
                path.display(),
                producer_hint(artifact)
            ))
            .into());
        }
        if !self.force {
            self.check_fresh(artifact, config_hash_of, 0)?;
        }
        Ok(path)
    }

    fn check_fresh(&self, artifact: &str, config_hash_of: &dyn Fn(&str) -> String, depth: usize) -> CliResult<()> {
        let path = self.path(artifact);
        let stale = |reason: String| CliError::Stale { path: path.clone(), reason };
        let Some((step, record)) = self.manifest.producer_of(artifact) else {
            return Err(stale("not recorded in the manifest".into()));
        };
        if depth > 16 {
            return Err(stale("manifest has a dependency cycle".into()));
        }
        if sha256_file(&path)? != record.outputs[artifact] {
            return Err(stale(format!("modified after `{step}` wrote it")));
        }
        if record.config_hash != config_hash_of(step) {
            return Err(stale(format!("configuration for `{step}` changed since it ran")));
        }
        for (input, hash) in &record.inputs {
            let input_path = if Path::new(input).is_absolute() { PathBuf::from(input) } else { self.path(input) };
            if !input_path.exists() {
                return Err(stale(format!("its input {} no longer exists", input_path.display())));
            }
            if &sha256_file(&input_path)? != hash {
                return Err(stale(format!("its input {} changed since `{step}` ran", input_path.display())));
            }
            if !Path::new(input).is_absolute() {
                self.check_fresh(input, config_hash_of, depth + 1)?;
            }
        }
        Ok(())
    }

    /// Opens an output file for writing, creating parent directories.
    pub fn create(&self, artifact: &str) -> CliResult<BufWriter<File>> {
        let path = self.path(artifact);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(format!("creating {}", parent.display()), e))?;
        }
        File::create(&path)
            .map(BufWriter::new)
            .map_err(|e| CliError::io(format!("creating {}", path.display()), e))
    }

    /// Records a completed step and persists the manifest.
    pub fn record(&mut self, step: &str, config_hash: String, inputs: &[PathBuf], outputs: &[&str]) -> CliResult<()> {
        let mut rec = StepRecord {
            config_hash,
            ..Default::default()
        };
        for p in inputs {
            let key = match p.strip_prefix(&self.root) {
                Ok(rel) => rel.to_string_lossy().into_owned(),
                Err(_) => fs::canonicalize(p).unwrap_or_else(|_| p.clone()).to_string_lossy().into_owned(),
            };
            rec.inputs.insert(key, sha256_file(p)?);
        }
        for o in outputs {
            rec.outputs.insert(o.to_string(), sha256_file(&self.path(o))?);
        }
        // An artifact has exactly one producer: the step that wrote it last.
        for other in self.manifest.steps.values_mut() {
            other.outputs.retain(|k, _| !rec.outputs.contains_key(k));
        }
        self.manifest.steps.retain(|_, r| !r.outputs.is_empty());
        self.manifest.steps.insert(step.to_string(), rec);
        let path = self.path(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(format!("writing {}", path.display()), e))
    }
}

impl Drop for WorkDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK));
    }
}
