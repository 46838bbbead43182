use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::hashing::sha256_hex;

/// Decoding settings passed to the LLM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeParams {
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl DecodeParams {
    /// Deterministic answering.
    pub fn answering() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: Some(256),
        }
    }

    /// Question generation; some diversity is wanted.
    pub fn generation() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: Some(1024),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("unscripted prompt {fingerprint} (nearest scripted fingerprint: {nearest})")]
    Unscripted { fingerprint: String, nearest: String },
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("request rejected with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response body: {0}")]
    MalformedResponse(String),
    #[error("transcript or cache I/O on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid transcript: {0}")]
    Transcript(String),
}

/// A single-turn text completion backend.
pub trait LlmProvider: Send + Sync {
    fn complete(&self, prompt: &str, params: &DecodeParams) -> Result<String, LlmError>;
}

impl<T: LlmProvider + ?Sized> LlmProvider for Arc<T> {
    fn complete(&self, prompt: &str, params: &DecodeParams) -> Result<String, LlmError> {
        (**self).complete(prompt, params)
    }
}

impl<T: LlmProvider + ?Sized> LlmProvider for &T {
    fn complete(&self, prompt: &str, params: &DecodeParams) -> Result<String, LlmError> {
        (**self).complete(prompt, params)
    }
}

/// Fingerprint of an exact prompt string. Any byte change is a new prompt.
pub fn prompt_fingerprint(prompt: &str) -> String {
    sha256_hex(prompt.as_bytes())
}

/// Run many prompts through the provider in parallel, keeping input order.
pub fn complete_all(
    llm: &dyn LlmProvider,
    prompts: &[String],
    params: &DecodeParams,
) -> Vec<Result<String, LlmError>> {
    use rayon::prelude::*;
    prompts
        .par_iter()
        .map(|p| llm.complete(p, params))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub fingerprint: String,
    pub response: String,
}

/// Replays stored responses keyed by prompt fingerprint.
#[derive(Debug, Clone)]
pub struct ScriptedLlm {
    responses: BTreeMap<String, String>,
}

impl ScriptedLlm {
    pub fn new(responses: BTreeMap<String, String>) -> Result<Self, LlmError> {
        if responses.is_empty() {
            return Err(LlmError::Transcript("transcript is empty".into()));
        }
        Ok(Self { responses })
    }

    /// Build from literal (prompt, response) pairs.
    pub fn from_pairs<I, P, R>(pairs: I) -> Result<Self, LlmError>
    where
        I: IntoIterator<Item = (P, R)>,
        P: AsRef<str>,
        R: Into<String>,
    {
        Self::new(
            pairs
                .into_iter()
                .map(|(p, r)| (prompt_fingerprint(p.as_ref()), r.into()))
                .collect(),
        )
    }

    /// Load a json-lines transcript of `{fingerprint, response}` records.
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        Self::parse(&fs::read_to_string(path).map_err(|source| LlmError::Io {
            path: path.to_path_buf(),
            source,
        })?)
    }

    pub fn parse(jsonl: &str) -> Result<Self, LlmError> {
        let mut responses = BTreeMap::new();
        for (i, line) in jsonl.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: TranscriptEntry = serde_json::from_str(line)
                .map_err(|e| LlmError::Transcript(format!("line {}: {e}", i + 1)))?;
            responses.insert(e.fingerprint, e.response);
        }
        Self::new(responses)
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    fn nearest(&self, fingerprint: &str) -> String {
        let common = |a: &str| {
            a.bytes()
                .zip(fingerprint.bytes())
                .take_while(|(x, y)| x == y)
                .count()
        };
        let after = self.responses.range(fingerprint.to_owned()..).next();
        let before = self.responses.range(..fingerprint.to_owned()).next_back();
        [before, after]
            .into_iter()
            .flatten()
            .map(|(k, _)| k)
            .max_by_key(|k| common(k))
            .cloned()
            .unwrap_or_default()
    }
}

impl LlmProvider for ScriptedLlm {
    fn complete(&self, prompt: &str, _params: &DecodeParams) -> Result<String, LlmError> {
        let fp = prompt_fingerprint(prompt);
        match self.responses.get(&fp) {
            Some(r) => Ok(r.clone()),
            None => Err(LlmError::Unscripted {
                nearest: self.nearest(&fp),
                fingerprint: fp,
            }),
        }
    }
}

/// Create a replaying provider from a fingerprint-keyed transcript.
pub fn scripted_llm(transcript: BTreeMap<String, String>) -> Result<ScriptedLlm, LlmError> {
    ScriptedLlm::new(transcript)
}

/// Records every successful exchange so it can be replayed later.
pub struct RecordingLlm<L> {
    inner: L,
    log: Mutex<BTreeMap<String, String>>,
}

impl<L: LlmProvider> RecordingLlm<L> {
    pub fn new(inner: L) -> Self {
        Self {
            inner,
            log: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn transcript(&self) -> BTreeMap<String, String> {
        self.log.lock().expect("lock").clone()
    }

    /// Transcript as json-lines sorted by fingerprint.
    pub fn transcript_jsonl(&self) -> String {
        let mut s = String::new();
        for (fingerprint, response) in self.transcript() {
            let e = TranscriptEntry {
                fingerprint,
                response,
            };
            s.push_str(&serde_json::to_string(&e).expect("serializable"));
            s.push('\n');
        }
        s
    }
}

impl<L: LlmProvider> LlmProvider for RecordingLlm<L> {
    fn complete(&self, prompt: &str, params: &DecodeParams) -> Result<String, LlmError> {
        let r = self.inner.complete(prompt, params)?;
        self.log
            .lock()
            .expect("lock")
            .insert(prompt_fingerprint(prompt), r.clone());
        Ok(r)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PromptCacheRecord {
    prompt_fingerprint: String,
    response: String,
}

type Slot = Arc<Mutex<Option<String>>>;

/// Prompt-level response cache, optionally persisted as an append-only
/// json-lines log.
pub struct PromptCache {
    slots: Mutex<HashMap<String, Slot>>,
    log: Option<(PathBuf, Mutex<fs::File>)>,
}

impl PromptCache {
    pub fn in_memory() -> Self {
        Self {
            slots: Mutex::new(HashMap::new()),
            log: None,
        }
    }

    /// Open (or create) a persisted cache; existing records are loaded, later
    /// records overriding earlier ones.
    pub fn open(path: &Path) -> Result<Self, LlmError> {
        let io_err = |source| LlmError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut slots = HashMap::new();
        if path.exists() {
            let file = fs::File::open(path).map_err(io_err)?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: PromptCacheRecord = serde_json::from_str(&line).map_err(|e| {
                    LlmError::Transcript(format!("{}:{}: {e}", path.display(), i + 1))
                })?;
                slots.insert(
                    rec.prompt_fingerprint,
                    Arc::new(Mutex::new(Some(rec.response))),
                );
            }
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        Ok(Self {
            slots: Mutex::new(slots),
            log: Some((path.to_path_buf(), Mutex::new(file))),
        })
    }

    pub fn len(&self) -> usize {
        self.slots.lock().expect("lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slot(&self, fingerprint: &str) -> Slot {
        self.slots
            .lock()
            .expect("lock")
            .entry(fingerprint.to_owned())
            .or_default()
            .clone()
    }

    fn append(&self, fingerprint: &str, response: &str) -> Result<(), LlmError> {
        if let Some((path, file)) = &self.log {
            let line = serde_json::to_string(&PromptCacheRecord {
                prompt_fingerprint: fingerprint.to_owned(),
                response: response.to_owned(),
            })
            .expect("serializable");
            let mut f = file.lock().expect("lock");
            writeln!(f, "{line}")
                .and_then(|_| f.flush())
                .map_err(|source| LlmError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        Ok(())
    }
}

/// Wraps a provider so that an identical prompt is sent upstream at most once.
pub struct CachedLlm<L> {
    inner: L,
    cache: PromptCache,
}

impl<L> CachedLlm<L> {
    pub fn cache(&self) -> &PromptCache {
        &self.cache
    }
}

impl<L: LlmProvider> LlmProvider for CachedLlm<L> {
    fn complete(&self, prompt: &str, params: &DecodeParams) -> Result<String, LlmError> {
        let fp = prompt_fingerprint(prompt);
        let slot = self.cache.slot(&fp);
        // holding the slot lock makes concurrent identical prompts wait for
        // the first upstream call
        let mut guard = slot.lock().expect("lock");
        if let Some(r) = guard.as_ref() {
            return Ok(r.clone());
        }
        let r = self.inner.complete(prompt, params)?;
        self.cache.append(&fp, &r)?;
        *guard = Some(r.clone());
        Ok(r)
    }
}

pub fn cached<L: LlmProvider>(llm: L, cache: PromptCache) -> CachedLlm<L> {
    CachedLlm { inner: llm, cache }
}
