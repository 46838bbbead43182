use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, PipelineError, Stage};
use crate::hashing::{hash_fields, sha256_hex};

/// What a completed stage consumed and produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub input_fingerprint: String,
    /// Workspace-relative path -> SHA-256 of the file.
    pub outputs: BTreeMap<String, String>,
}

impl StageRecord {
    /// Fingerprint of the outputs, consumed by downstream stages.
    pub fn output_fingerprint(&self) -> String {
        hash_fields(
            self.outputs
                .iter()
                .flat_map(|(p, h)| [p.as_bytes(), h.as_bytes()]),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct State {
    pub stages: BTreeMap<String, StageRecord>,
}

/// Config hash and the fingerprints a report was produced from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    /// Stage -> input fingerprint for this stage, output fingerprint for
    /// its upstream stages.
    pub stages: BTreeMap<String, String>,
}

impl Provenance {
    pub fn to_text(&self) -> String {
        let mut s = format!("config {}\n", self.config_hash);
        for (k, v) in &self.stages {
            s.push_str(&format!("{k} {v}\n"));
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("<!-- config {} -->\n", self.config_hash);
        for (k, v) in &self.stages {
            s.push_str(&format!("<!-- {k} {v} -->\n"));
        }
        s
    }
}

/// Holds the workspace lock; released on drop.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A workspace directory:
/// `state.json`, `config.toml`, `runlog.jsonl`, `artifacts/`, `reports/`,
/// `cache/` and `inputs/`.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

pub(crate) fn hash_file(path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

impl Workspace {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let ws = Self { root: root.into() };
        for d in ["artifacts", "reports", "cache"] {
            let p = ws.root.join(d);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Ok(ws)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.root.join("artifacts").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    /// Take the single-writer lock.
    pub fn lock(&self) -> Result<LockGuard, PipelineError> {
        let path = self.root.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(path)),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    pub fn state(&self) -> Result<State, PipelineError> {
        let path = self.root.join("state.json");
        match fs::read_to_string(&path) {
            Ok(s) => serde_json::from_str(&s)
                .map_err(|e| PipelineError::Config(format!("malformed {}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(State::default()),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    pub fn save_state(&self, state: &State) -> Result<(), PipelineError> {
        let path = self.root.join("state.json");
        let tmp = self.root.join("state.json.tmp");
        let body = serde_json::to_string_pretty(state).expect("state serializes") + "\n";
        fs::write(&tmp, body).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    /// Hash every output of a stage.
    pub fn record(&self, input_fingerprint: String, outputs: &[PathBuf]) -> Result<StageRecord, PipelineError> {
        let mut map = BTreeMap::new();
        for p in outputs {
            let rel = p
                .strip_prefix(&self.root)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/");
            map.insert(rel, hash_file(p)?);
        }
        Ok(StageRecord {
            input_fingerprint,
            outputs: map,
        })
    }

    /// First output of `record` that is missing or differs from its hash.
    pub fn verify(&self, record: &StageRecord) -> Option<String> {
        for (rel, h) in &record.outputs {
            match hash_file(&self.root.join(rel)) {
                Ok(got) if &got == h => {}
                Ok(_) => return Some(format!("{rel} was modified")),
                Err(_) => return Some(format!("{rel} is missing")),
            }
        }
        None
    }

    pub fn append_log(&self, entry: &serde_json::Value) -> Result<(), PipelineError> {
        let path = self.root.join("runlog.jsonl");
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        writeln!(f, "{entry}").map_err(io_err(&path))
    }

    /// Recorded stage, or a dependency error naming it.
    pub fn require<'a>(&self, state: &'a State, stage: Stage, dep: Stage) -> Result<&'a StageRecord, PipelineError> {
        state.stages.get(dep.name()).ok_or(PipelineError::Dependency {
            stage,
            requires: dep,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        let g = ws.lock().unwrap();
        assert!(matches!(ws.lock(), Err(PipelineError::Locked(_))));
        drop(g);
        assert!(ws.lock().is_ok());
    }

    #[test]
    fn verify_detects_changes() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        let p = ws.artifact("a.txt");
        fs::write(&p, "one").unwrap();
        let rec = ws.record("fp".into(), std::slice::from_ref(&p)).unwrap();
        assert_eq!(rec.outputs.keys().next().unwrap(), "artifacts/a.txt");
        assert_eq!(ws.verify(&rec), None);
        fs::write(&p, "two").unwrap();
        assert!(ws.verify(&rec).unwrap().contains("modified"));
        fs::remove_file(&p).unwrap();
        assert!(ws.verify(&rec).unwrap().contains("missing"));
    }

    #[test]
    fn state_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        assert_eq!(ws.state().unwrap(), State::default());
        let mut st = State::default();
        st.stages.insert("ingest".into(), StageRecord { input_fingerprint: "x".into(), outputs: BTreeMap::new() });
        ws.save_state(&st).unwrap();
        assert_eq!(ws.state().unwrap(), st);
    }
}
