//! Stage orchestration over a persistent workspace.
//!
//! Each stage reads the artifacts of the stages it depends on and records a
//! fingerprint of everything it consumed. A completed stage with unchanged
//! inputs is skipped; a stage whose recorded inputs no longer match is
//! refused unless forced.

mod artifacts;
mod config;
pub mod demo;
mod stages;
mod workspace;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

pub use artifacts::{load_dense, save_dense};
pub use config::{
    ClusterSection, CorpusSection, CostSection, CqgSection, EncoderKind, EncoderSection,
    EvalSection, GenerationMethod, LlmKind, LlmSection, MbqaSection, PipelineConfig,
    RetrievalFiles,
};
pub use stages::{Pipeline, StageSummary, Status};
pub use workspace::{Provenance, StageRecord, State, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Encode,
    Cluster,
    Generate,
    Probe,
    Select,
    Collect,
    Train,
    Embed,
    EvalSts,
    EvalRetrieval,
    EvalClustering,
    Explain,
    Ablate,
    Cost,
}

impl Stage {
    /// Every stage in execution order.
    pub const ALL: [Stage; 15] = [
        Stage::Ingest,
        Stage::Encode,
        Stage::Cluster,
        Stage::Generate,
        Stage::Probe,
        Stage::Select,
        Stage::Collect,
        Stage::Train,
        Stage::Embed,
        Stage::EvalSts,
        Stage::EvalRetrieval,
        Stage::EvalClustering,
        Stage::Explain,
        Stage::Ablate,
        Stage::Cost,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Encode => "encode",
            Stage::Cluster => "cluster",
            Stage::Generate => "generate",
            Stage::Probe => "probe",
            Stage::Select => "select",
            Stage::Collect => "collect",
            Stage::Train => "train",
            Stage::Embed => "embed",
            Stage::EvalSts => "eval-sts",
            Stage::EvalRetrieval => "eval-retrieval",
            Stage::EvalClustering => "eval-clustering",
            Stage::Explain => "explain",
            Stage::Ablate => "ablate",
            Stage::Cost => "cost",
        }
    }

    /// Stages whose artifacts this one reads.
    pub fn dependencies(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Ingest | Cost => &[],
            Encode => &[Ingest],
            Cluster => &[Encode],
            Generate => &[Ingest, Cluster],
            Probe => &[Ingest, Cluster, Generate],
            Select => &[Probe],
            Collect => &[Ingest, Cluster, Select],
            Train => &[Ingest, Select, Collect],
            Embed => &[Ingest, Train],
            EvalSts | EvalRetrieval | EvalClustering | Ablate => &[Train],
            Explain => &[Select, Train],
        }
    }

    /// Dependencies and their dependencies, in execution order.
    pub fn upstream(self) -> Vec<Stage> {
        let mut out: Vec<Stage> = Vec::new();
        let mut stack = self.dependencies().to_vec();
        while let Some(s) = stack.pop() {
            if !out.contains(&s) {
                out.push(s);
                stack.extend_from_slice(s.dependencies());
            }
        }
        out.sort();
        out
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} needs the output of stage {requires}; run {requires} first")]
    Dependency { stage: Stage, requires: Stage },
    #[error("stage {stage}: artifacts of {upstream} changed since it completed ({detail}); re-run {upstream} or pass --force")]
    Mismatch {
        stage: Stage,
        upstream: Stage,
        detail: String,
    },
    #[error("stage {stage} already completed with different inputs; pass --force to run it again")]
    Refused { stage: Stage },
    #[error("stage {stage}: provider failed: {message}")]
    Provider { stage: Stage, message: String },
    #[error("workspace is locked by {0}; remove it if no other run is active")]
    Locked(PathBuf),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("stage {stage} failed: {message}")]
    Failed { stage: Stage, message: String },
}

impl PipelineError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Dependency { .. }
            | PipelineError::Mismatch { .. }
            | PipelineError::Refused { .. } => 3,
            PipelineError::Provider { .. } => 4,
            _ => 1,
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}
