//! Contrastive question generation: sampling, prompting, probing, quality
//! scoring and selection into a deduplicated question bank. Also hosts the
//! example-driven baseline generator.

mod generate;
mod probe;
mod qaemb;
mod sample;
mod select;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterError;
use crate::prompts::ParseError;
use crate::providers::{EncoderError, LlmError};

pub use generate::{generate_candidates, sample_prompt, GenerationOutcome};
pub use probe::{
    plan_probe, probe_all, probe_question, quality, ProbeConfig, ProbeOutcome, ProbePlan,
};
pub use qaemb::{qaemb_generate, QaembConfig, DEFAULT_EXAMPLE_QUESTIONS};
pub use sample::{sample_contrastive, ContrastiveConfig, ContrastiveSample};
pub use select::{
    dedup_in_order, select_question_bank, BankHeader, BankQuestion, QuestionBank, ScoredCandidate,
};

#[derive(Debug, thiserror::Error)]
pub enum CqgError {
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("not enough documents for {pool} of cluster {cluster}: need {needed}, have {available}")]
    DeficientPool {
        pool: &'static str,
        cluster: usize,
        needed: usize,
        available: usize,
    },
    #[error("candidate has no origin cluster to probe against")]
    NoOriginCluster,
    #[error("no example questions given")]
    NoExamples,
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed question bank {path}: {message}")]
    Format { path: PathBuf, message: String },
}

/// A question as produced by the LLM, before scoring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateQuestion {
    pub text: String,
    pub origin_cluster: Option<usize>,
    /// Position within the LLM's numbered list.
    pub ordinal: usize,
}
