//! Text corpora: ingestion, exact deduplication, MEDI2-style preprocessing and
//! held-out splitting.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::hashing::{hash_fields, sha256_hex};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("document {0:?} has empty text")]
    EmptyText(String),
    #[error("held-out fraction {0} is outside (0, 1)")]
    BadFraction(f64),
    #[error("corpus is empty")]
    Empty,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

/// An ordered collection of documents with unique ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<Document>,
    dedup_applied: bool,
}

impl Corpus {
    /// Build a corpus, checking id uniqueness and non-empty texts.
    pub fn new(documents: Vec<Document>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(documents.len());
        for doc in &documents {
            if doc.text.trim().is_empty() {
                return Err(CorpusError::EmptyText(doc.id.clone()));
            }
            if !seen.insert(doc.id.as_str()) {
                return Err(CorpusError::DuplicateId(doc.id.clone()));
            }
        }
        Ok(Self {
            documents,
            dedup_applied: false,
        })
    }

    /// Build from bare texts, assigning content-hash ids.
    pub fn from_texts<I, S>(texts: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut ids = IdAssigner::default();
        let docs = texts
            .into_iter()
            .map(|t| {
                let text = t.into();
                Document {
                    id: ids.assign(&text),
                    text,
                    source: None,
                }
            })
            .collect();
        Self::new(docs)
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn dedup_applied(&self) -> bool {
        self.dedup_applied
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.documents.iter().map(|d| d.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    /// Map from document id to position.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.documents
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id.as_str(), i))
            .collect()
    }

    /// Write as json-lines `{id, text, source?}`.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
        for doc in &self.documents {
            let line = serde_json::to_string(doc).expect("documents serialize");
            writeln!(out, "{line}").map_err(io_err(path))?;
        }
        out.flush().map_err(io_err(path))
    }

    /// Fingerprint over ids and texts in order.
    pub fn fingerprint(&self) -> String {
        hash_fields(
            self.documents
                .iter()
                .flat_map(|d| [d.id.as_bytes(), d.text.as_bytes()]),
        )
    }
}

/// Content-hash id assignment. Repeated texts get `-<n>` suffixes so that
/// byte-identical documents can coexist before deduplication.
#[derive(Debug, Default)]
struct IdAssigner {
    seen: HashMap<String, usize>,
}

impl IdAssigner {
    fn assign(&mut self, text: &str) -> String {
        let base = text_id(text);
        let n = self.seen.entry(base.clone()).or_insert(0);
        let id = if *n == 0 {
            base
        } else {
            format!("{base}-{n}")
        };
        *n += 1;
        id
    }
}

/// Default document id: the first 32 hex digits of the SHA-256 of the text.
pub fn text_id(text: &str) -> String {
    let mut h = sha256_hex(text.as_bytes());
    h.truncate(32);
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    PlainLines,
    JsonLines,
}

/// A record that was skipped during ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedRecord {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub corpus: Corpus,
    pub skipped: Vec<SkippedRecord>,
}

#[derive(Deserialize)]
struct JsonDocument {
    #[serde(default)]
    id: Option<String>,
    text: String,
    #[serde(default)]
    source: Option<String>,
}

/// Read a corpus file. Blank lines are dropped; malformed json-lines records
/// are skipped and reported with their line number.
pub fn ingest(path: &Path, format: InputFormat) -> Result<Ingested, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut ids = IdAssigner::default();
    let mut docs = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match format {
            InputFormat::PlainLines => docs.push(Document {
                id: ids.assign(&line),
                text: line,
                source: None,
            }),
            InputFormat::JsonLines => match serde_json::from_str::<JsonDocument>(&line) {
                Ok(rec) if rec.text.trim().is_empty() => skipped.push(SkippedRecord {
                    line: i + 1,
                    reason: "empty text".into(),
                }),
                Ok(rec) => {
                    let id = match rec.id {
                        Some(id) => id,
                        None => ids.assign(&rec.text),
                    };
                    docs.push(Document {
                        id,
                        text: rec.text,
                        source: rec.source,
                    });
                }
                Err(e) => skipped.push(SkippedRecord {
                    line: i + 1,
                    reason: e.to_string(),
                }),
            },
        }
    }
    for s in &skipped {
        warn!(path = %path.display(), line = s.line, reason = %s.reason, "skipped record");
    }
    Ok(Ingested {
        corpus: Corpus::new(docs)?,
        skipped,
    })
}

/// Keep the first occurrence of every byte-identical text.
pub fn exact_dedup(corpus: Corpus) -> Corpus {
    let mut seen = HashSet::with_capacity(corpus.documents.len());
    let documents = corpus
        .documents
        .into_iter()
        .filter(|d| seen.insert(d.text.clone()))
        .collect();
    Corpus {
        documents,
        dedup_applied: true,
    }
}

/// Default separator between the instruction prefix and the content in
/// MEDI2-style records.
pub const DEFAULT_INSTRUCTION_DELIMITER: &str = "|";

#[derive(Debug, Clone)]
pub struct Medi2Outcome {
    pub corpus: Corpus,
    pub files_read: Vec<PathBuf>,
    /// Records (or instances) skipped for a missing delimiter or bad JSON.
    pub skipped: Vec<(PathBuf, SkippedRecord)>,
}

/// Extract positive and negative instance texts from a directory of MEDI2-style
/// json-lines files.
///
/// Files whose name starts with `task` are skipped. Each instance has its
/// instruction prefix (everything up to the first `delimiter`) removed. The
/// merged texts are exactly deduplicated. Queries are not included.
pub fn medi2_preprocess(dir: &Path, delimiter: &str) -> Result<Medi2Outcome, CorpusError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| !n.starts_with("task"))
        })
        .collect();
    files.sort();

    let mut ids = IdAssigner::default();
    let mut docs = Vec::new();
    let mut skipped = Vec::new();
    for path in &files {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let source = path.file_name().and_then(|n| n.to_str()).map(str::to_owned);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let skip = |reason: String| {
                (
                    path.clone(),
                    SkippedRecord {
                        line: i + 1,
                        reason,
                    },
                )
            };
            let record: serde_json::Value = match serde_json::from_str(&line) {
                Ok(v) => v,
                Err(e) => {
                    skipped.push(skip(e.to_string()));
                    continue;
                }
            };
            let mut instances = Vec::new();
            for key in ["pos", "positive", "neg", "negative"] {
                collect_strings(record.get(key), &mut instances);
            }
            let mut stripped = Vec::with_capacity(instances.len());
            let mut missing = false;
            for inst in &instances {
                match strip_instruction(inst, delimiter) {
                    Some(t) => stripped.push(t),
                    None => missing = true,
                }
            }
            if missing {
                skipped.push(skip(format!("missing instruction delimiter {delimiter:?}")));
                continue;
            }
            for text in stripped {
                docs.push(Document {
                    id: ids.assign(&text),
                    text,
                    source: source.clone(),
                });
            }
        }
    }
    for (p, s) in &skipped {
        warn!(path = %p.display(), line = s.line, reason = %s.reason, "skipped MEDI2 record");
    }
    Ok(Medi2Outcome {
        corpus: exact_dedup(Corpus::new(docs)?),
        files_read: files,
        skipped,
    })
}

fn collect_strings(value: Option<&serde_json::Value>, out: &mut Vec<String>) {
    match value {
        Some(serde_json::Value::String(s)) => out.push(s.clone()),
        Some(serde_json::Value::Array(items)) => {
            for item in items {
                collect_strings(Some(item), out);
            }
        }
        _ => {}
    }
}

fn strip_instruction(instance: &str, delimiter: &str) -> Option<String> {
    let (_, content) = instance.split_once(delimiter)?;
    let content = content.trim();
    (!content.is_empty()).then(|| content.to_owned())
}

/// A train / held-out partition of corpus ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_ids: BTreeSet<String>,
    pub heldout_ids: BTreeSet<String>,
    pub seed: u64,
}

/// Partition ids by a seeded hash; the `round(fraction * n)` ids with the
/// smallest hashes are held out.
pub fn split_heldout(corpus: &Corpus, fraction: f64, seed: u64) -> Result<Split, CorpusError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CorpusError::BadFraction(fraction));
    }
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut keyed: Vec<(String, &str)> = corpus
        .ids()
        .map(|id| {
            (
                hash_fields([seed.to_le_bytes().as_slice(), id.as_bytes()]),
                id,
            )
        })
        .collect();
    keyed.sort();
    let n_heldout = (fraction * corpus.len() as f64).round() as usize;
    let heldout_ids = keyed[..n_heldout]
        .iter()
        .map(|(_, id)| id.to_string())
        .collect();
    let train_ids = keyed[n_heldout..]
        .iter()
        .map(|(_, id)| id.to_string())
        .collect();
    Ok(Split {
        train_ids,
        heldout_ids,
        seed,
    })
}
