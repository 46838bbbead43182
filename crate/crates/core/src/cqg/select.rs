use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{CandidateQuestion, CqgError};
use crate::hashing::hash_fields;
use crate::providers::{embed_all, Embedding, EncoderProvider};

const EMBED_BATCH: usize = 64;

/// A probed candidate ready for selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub question: CandidateQuestion,
    pub quality: f64,
}

/// One embedding dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankQuestion {
    pub id: usize,
    pub text: String,
    pub origin_cluster: Option<usize>,
    /// Absent for banks built without probing.
    pub quality: Option<f64>,
    pub embedding: Embedding,
}

/// First record of a persisted bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankHeader {
    pub theta: f64,
    pub t: Option<usize>,
    pub m: usize,
    pub encoder_fingerprint: String,
}

/// The ordered, deduplicated question set. Question `i` is dimension `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionBank {
    questions: Vec<BankQuestion>,
    pub theta: f64,
    pub t: Option<usize>,
    pub encoder_fingerprint: String,
}

impl QuestionBank {
    pub fn questions(&self) -> &[BankQuestion] {
        &self.questions
    }

    pub fn m(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.questions.iter().map(|q| q.text.as_str()).collect()
    }

    /// Identity of the dimension set: ids and texts in order.
    pub fn fingerprint(&self) -> String {
        let ids: Vec<String> = self.questions.iter().map(|q| q.id.to_string()).collect();
        hash_fields(
            self.questions
                .iter()
                .zip(&ids)
                .flat_map(|(q, id)| [id.as_bytes(), q.text.as_bytes()]),
        )
    }

    /// Keep only the first `m` dimensions.
    pub fn truncated(&self, m: usize) -> Self {
        Self {
            questions: self.questions[..m.min(self.m())].to_vec(),
            ..self.clone()
        }
    }

    pub fn header(&self) -> BankHeader {
        BankHeader {
            theta: self.theta,
            t: self.t,
            m: self.m(),
            encoder_fingerprint: self.encoder_fingerprint.clone(),
        }
    }

    /// Header line followed by one json record per question.
    pub fn save(&self, path: &Path) -> Result<(), CqgError> {
        let io_err = |source| CqgError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
        let header = serde_json::to_string(&self.header()).expect("header serializes");
        writeln!(out, "{header}").map_err(io_err)?;
        for q in &self.questions {
            let line = serde_json::to_string(q).expect("question serializes");
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, CqgError> {
        let bad = |message: String| CqgError::Format {
            path: path.to_path_buf(),
            message,
        };
        let file = fs::File::open(path).map_err(|source| CqgError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut lines = BufReader::new(file).lines();
        let read = |l: Option<io::Result<String>>| -> Result<Option<String>, CqgError> {
            l.transpose().map_err(|source| CqgError::Io {
                path: path.to_path_buf(),
                source,
            })
        };
        let header: BankHeader = match read(lines.next())? {
            Some(l) => serde_json::from_str(&l).map_err(|e| bad(format!("header: {e}")))?,
            None => return Err(bad("missing header".into())),
        };
        let mut questions = Vec::with_capacity(header.m);
        while let Some(line) = read(lines.next())? {
            if line.trim().is_empty() {
                continue;
            }
            let q: BankQuestion = serde_json::from_str(&line)
                .map_err(|e| bad(format!("record {}: {e}", questions.len() + 1)))?;
            if q.id != questions.len() {
                return Err(bad(format!("expected id {}, found {}", questions.len(), q.id)));
            }
            questions.push(q);
        }
        if questions.len() != header.m {
            return Err(bad(format!(
                "header says {} questions, found {}",
                header.m,
                questions.len()
            )));
        }
        Ok(Self {
            questions,
            theta: header.theta,
            t: header.t,
            encoder_fingerprint: header.encoder_fingerprint,
        })
    }
}

fn admissible(e: &Embedding, admitted: &[BankQuestion], theta: f64) -> bool {
    admitted.iter().all(|q| e.dot(&q.embedding) <= theta)
}

fn embed_texts(encoder: &dyn EncoderProvider, texts: &[&str]) -> Result<Vec<Embedding>, CqgError> {
    Ok(embed_all(encoder, texts, EMBED_BATCH)?
        .into_iter()
        .map(Embedding::normalized)
        .collect())
}

/// Select the bank. Clusters are visited in ascending order and, within a
/// cluster, candidates by descending quality then ordinal. A candidate is
/// admitted when its cosine similarity to every admitted question is at
/// most `theta` and its cluster holds fewer than `t` questions.
pub fn select_question_bank(
    candidates: &[ScoredCandidate],
    encoder: &dyn EncoderProvider,
    theta: f64,
    t: usize,
) -> Result<QuestionBank, CqgError> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (qa, qb) = (&candidates[a], &candidates[b]);
        qa.question
            .origin_cluster
            .cmp(&qb.question.origin_cluster)
            .then(qb.quality.total_cmp(&qa.quality))
            .then(qa.question.ordinal.cmp(&qb.question.ordinal))
    });
    let texts: Vec<&str> = order
        .iter()
        .map(|&i| candidates[i].question.text.as_str())
        .collect();
    let embeddings = embed_texts(encoder, &texts)?;

    let mut admitted: Vec<BankQuestion> = Vec::new();
    let mut per_cluster: HashMap<Option<usize>, usize> = HashMap::new();
    for (&i, e) in order.iter().zip(embeddings) {
        let c = &candidates[i];
        let count = per_cluster.entry(c.question.origin_cluster).or_default();
        if *count >= t || !admissible(&e, &admitted, theta) {
            continue;
        }
        *count += 1;
        admitted.push(BankQuestion {
            id: admitted.len(),
            text: c.question.text.clone(),
            origin_cluster: c.question.origin_cluster,
            quality: Some(c.quality),
            embedding: e,
        });
    }
    if admitted.is_empty() {
        warn!("question bank is empty");
    }
    Ok(QuestionBank {
        questions: admitted,
        theta,
        t: Some(t),
        encoder_fingerprint: encoder.fingerprint(),
    })
}

/// Deduplicate questions in their given order with no per-cluster cap and
/// no quality scores.
pub fn dedup_in_order<S: AsRef<str>>(
    questions: &[S],
    encoder: &dyn EncoderProvider,
    theta: f64,
) -> Result<QuestionBank, CqgError> {
    let texts: Vec<&str> = questions.iter().map(AsRef::as_ref).collect();
    let embeddings = embed_texts(encoder, &texts)?;
    let mut admitted: Vec<BankQuestion> = Vec::new();
    for (text, e) in texts.iter().zip(embeddings) {
        if admissible(&e, &admitted, theta) {
            admitted.push(BankQuestion {
                id: admitted.len(),
                text: (*text).to_owned(),
                origin_cluster: None,
                quality: None,
                embedding: e,
            });
        }
    }
    Ok(QuestionBank {
        questions: admitted,
        theta,
        t: None,
        encoder_fingerprint: encoder.fingerprint(),
    })
}
