//! Evaluation: similarity, retrieval and clustering harnesses, their
//! metrics, cognitive load, pair explanations and sweeps over the number of
//! dimensions and the decision threshold.

mod ablation;
mod interpret;
mod metrics;
mod tasks;

use std::path::PathBuf;

use crate::binary::BinaryError;
use crate::cluster::ClusterError;

pub use ablation::{ablate_m, ablate_tau, AblationRow, Sweep};
pub use interpret::{
    cognitive_load, explain_pair, mean_cognitive_load, truncate_dimensions, CognitiveLoad,
    ExplainedQuestion, ExplanationReport,
};
pub use metrics::{
    average_ranks, cosine_similarity, ndcg_at_k, spearman, v_measure, Gain, VMeasure,
};
pub use tasks::{
    clustering_evaluate, load_clustering, load_retrieval, load_sts, retrieval_evaluate,
    sts_evaluate, ClusteringItem, ClusteringTask, DenseRows, RetrievalScore, RetrievalTask,
    Rows, StsPair, StsScore, StsTask, TaskText,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("correlation undefined: one side is constant")]
    Constant,
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("rows come from bank {rows}, explanation bank is {bank}")]
    BankMismatch { rows: String, bank: String },
    #[error("task file {path}:{line}: {message}")]
    Task {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Binary(#[from] BinaryError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}
