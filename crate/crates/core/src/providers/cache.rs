use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

/// One line of the answer log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: usize,
    pub document_id: String,
    pub answer: bool,
    pub prompt_fingerprint: String,
}

#[derive(Debug, thiserror::Error)]
pub enum AnswerCacheError {
    #[error("answer cache {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("answer cache {path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Yes/no answers keyed by (question id, document id), backed by an
/// append-only json-lines log. Reads are concurrent; appends are serialized.
pub struct AnswerCache {
    entries: RwLock<HashMap<(usize, String), bool>>,
    log: Option<(PathBuf, Mutex<fs::File>)>,
}

impl AnswerCache {
    pub fn in_memory() -> Self {
        Self {
            entries: RwLock::new(HashMap::new()),
            log: None,
        }
    }

    /// Open or create the log at `path`, replaying existing records. Later
    /// records for the same key win.
    pub fn open(path: &Path) -> Result<Self, AnswerCacheError> {
        let io_err = |source| AnswerCacheError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut entries = HashMap::new();
        if path.exists() {
            for rec in read_log(path)? {
                entries.insert((rec.question_id, rec.document_id), rec.answer);
            }
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        Ok(Self {
            entries: RwLock::new(entries),
            log: Some((path.to_path_buf(), Mutex::new(file))),
        })
    }

    pub fn get(&self, question_id: usize, document_id: &str) -> Option<bool> {
        self.entries
            .read()
            .expect("lock")
            .get(&(question_id, document_id.to_owned()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Append records to the log, then publish them to readers.
    pub fn insert_all(&self, records: &[AnswerRecord]) -> Result<(), AnswerCacheError> {
        if let Some((path, file)) = &self.log {
            let mut buf = String::new();
            for r in records {
                buf.push_str(&serde_json::to_string(r).expect("serializable"));
                buf.push('\n');
            }
            let mut f = file.lock().expect("lock");
            f.write_all(buf.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|source| AnswerCacheError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        let mut entries = self.entries.write().expect("lock");
        for r in records {
            entries.insert((r.question_id, r.document_id.clone()), r.answer);
        }
        Ok(())
    }

    /// Snapshot of the current map.
    pub fn snapshot(&self) -> HashMap<(usize, String), bool> {
        self.entries.read().expect("lock").clone()
    }
}

/// Read every record of an answer log in file order.
pub fn read_log(path: &Path) -> Result<Vec<AnswerRecord>, AnswerCacheError> {
    let file = fs::File::open(path).map_err(|source| AnswerCacheError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| AnswerCacheError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| AnswerCacheError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(q: usize, d: &str, a: bool) -> AnswerRecord {
        AnswerRecord {
            question_id: q,
            document_id: d.into(),
            answer: a,
            prompt_fingerprint: "fp".into(),
        }
    }

    #[test]
    fn reopen_reproduces_map_with_last_write_winning() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("answers.jsonl");
        {
            let cache = AnswerCache::open(&path).unwrap();
            cache
                .insert_all(&[rec(0, "a", true), rec(1, "a", false)])
                .unwrap();
            cache.insert_all(&[rec(0, "a", false)]).unwrap();
            assert_eq!(cache.get(0, "a"), Some(false));
        }
        let reopened = AnswerCache::open(&path).unwrap();
        assert_eq!(reopened.len(), 2);
        assert_eq!(reopened.get(0, "a"), Some(false));
        assert_eq!(reopened.get(1, "a"), Some(false));
        assert_eq!(reopened.get(2, "a"), None);
        assert_eq!(read_log(&path).unwrap().len(), 3);
    }
}
