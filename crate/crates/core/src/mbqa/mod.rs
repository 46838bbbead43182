//! Multi-head binary question answering: LLM answer collection, one small
//! MLP head per question over frozen encoder embeddings, weighted BCE
//! training, thresholded inference and the held-out report.

mod collect;
mod heads;
mod report;
mod train;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::binary::BinaryError;
use crate::cluster::ClusterError;
use crate::providers::{AnswerCacheError, EncoderError, LlmError};

pub use collect::{collect_answers, CollectConfig, CollectOutcome};
pub use heads::{
    binarize, embed_documents, embed_texts, head_forward, probabilities, sigmoid, threshold,
    MbqaHeads,
};
pub use report::{evaluate_heldout, ClassStats, ClassificationReport};
pub(crate) use report::thousands;
pub use train::{
    compute_pos_weight, head_loss_grad, train_heads, train_on_embeddings, weighted_bce,
    weighted_bce_dz, TrainOutcome, TrainingConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum MbqaError {
    #[error("no training examples")]
    NoExamples,
    #[error("answers are all one class ({yes} yes, {no} no); pos_weight is undefined")]
    OneClass { yes: usize, no: usize },
    #[error("embedding has dimension {got}, heads expect {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite loss at step {step} on question {question}")]
    NonFinite { step: u64, question: usize },
    #[error("held-out set is empty")]
    EmptyHeldout,
    #[error("question {question} is outside the bank of {m}")]
    UnknownQuestion { question: usize, m: usize },
    #[error("document {0:?} is not in the corpus")]
    UnknownDocument(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("heads were trained for bank {heads}, but the bank is {bank}")]
    BankMismatch { heads: String, bank: String },
    #[error("encoder failed on document {document_id:?}: {source}")]
    Encoder {
        document_id: String,
        source: EncoderError,
    },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Cache(#[from] AnswerCacheError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Binary(#[from] BinaryError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed heads file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

/// LLM answers for one document, keyed by question id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub document_id: String,
    pub answers: BTreeMap<usize, bool>,
}
