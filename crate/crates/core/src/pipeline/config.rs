use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::corpus::{InputFormat, DEFAULT_INSTRUCTION_DELIMITER};
use crate::cost::{CostParams, PriceTier};
use crate::cqg::{ContrastiveConfig, ProbeConfig, QaembConfig, DEFAULT_EXAMPLE_QUESTIONS};
use crate::eval::Gain;
use crate::hashing::sha256_hex;
use crate::mbqa::CollectConfig;
use crate::providers::{DecodeParams, RemoteLimits};

/// Every knob of a pipeline run. Defaults are the full-scale
/// hyperparameters; the demo preset overrides them for a small corpus.
#[derive(Default, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Root seed; every stage derives its own seed from it.
    pub seed: u64,
    pub corpus: CorpusSection,
    pub encoder: EncoderSection,
    pub llm: LlmSection,
    pub cluster: ClusterSection,
    pub cqg: CqgSection,
    pub mbqa: MbqaSection,
    pub eval: EvalSection,
    pub cost: CostSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Corpus file, relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub format: InputFormat,
    /// Directory of MEDI2-style json-lines files; used instead of `path`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub medi2_dir: Option<PathBuf>,
    pub instruction_delimiter: String,
    pub dedup: bool,
    /// Share of documents held out from head training.
    pub heldout_fraction: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            path: None,
            format: InputFormat::PlainLines,
            medi2_dir: None,
            instruction_delimiter: DEFAULT_INSTRUCTION_DELIMITER.to_owned(),
            dedup: true,
            heldout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub kind: EncoderKind,
    pub seed: u64,
    pub dim: usize,
    pub batch_size: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Mock,
            seed: 0,
            dim: 1024,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LlmKind {
    /// Chat-completion endpoint.
    Remote,
    /// Replay of a recorded transcript.
    Scripted,
    /// The synthetic world's keyword oracle; used to record demo transcripts.
    TopicOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSection {
    pub kind: LlmKind,
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API secret.
    pub secret_env: String,
    /// Transcript file for `scripted`, relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transcript: Option<PathBuf>,
    /// Keep every response in the workspace so no prompt is sent twice.
    pub cache: bool,
    pub limits: RemoteLimits,
    pub generation: DecodeParams,
    pub answering: DecodeParams,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            kind: LlmKind::Remote,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini-2024-07-18".into(),
            secret_env: "QEMBED_API_KEY".into(),
            transcript: None,
            cache: true,
            limits: RemoteLimits::default(),
            generation: DecodeParams::generation(),
            answering: DecodeParams::answering(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub renormalize_centroids: bool,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            k: 5_000,
            max_iters: crate::cluster::DEFAULT_MAX_ITERS,
            tol: crate::cluster::DEFAULT_TOL,
            renormalize_centroids: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenerationMethod {
    /// Per-cluster contrastive prompts, probing and top-t selection.
    Contrastive,
    /// Example-based prompts over random references, deduplicated only.
    Qaemb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CqgSection {
    pub method: GenerationMethod,
    pub sample: ContrastiveConfig,
    pub probe: ProbeConfig,
    /// Cosine threshold for deduplication.
    pub theta: f64,
    /// Questions kept per cluster.
    pub t: usize,
    pub qaemb: QaembConfig,
    pub qaemb_examples: Vec<String>,
}

impl Default for CqgSection {
    fn default() -> Self {
        Self {
            method: GenerationMethod::Contrastive,
            sample: ContrastiveConfig::default(),
            probe: ProbeConfig::default(),
            theta: 0.8,
            t: 4,
            qaemb: QaembConfig::default(),
            qaemb_examples: DEFAULT_EXAMPLE_QUESTIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MbqaSection {
    pub collect: CollectConfig,
    pub learning_rate: f64,
    pub steps: u64,
    pub hidden: usize,
    /// Positive-class weight; `#no / #yes` of the training answers when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pos_weight: Option<f64>,
    pub tau: f64,
    pub log_every: u64,
}

impl Default for MbqaSection {
    fn default() -> Self {
        Self {
            collect: CollectConfig::default(),
            learning_rate: 1e-4,
            steps: 3_000_000,
            hidden: 128,
            pos_weight: None,
            tau: 0.5,
            log_every: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalFiles {
    pub queries: PathBuf,
    pub corpus: PathBuf,
    pub qrels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub sts: Vec<PathBuf>,
    pub retrieval: Vec<RetrievalFiles>,
    pub clustering: Vec<PathBuf>,
    /// Cutoff for nDCG.
    pub k: usize,
    pub gain: Gain,
    /// Pairs of the first STS task to explain.
    pub explain_pairs: usize,
    pub ablate_taus: Vec<f64>,
    /// Dimension counts for the m sweep; empty means m/8, m/4, m/2, m.
    pub ablate_ms: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            sts: Vec::new(),
            retrieval: Vec::new(),
            clustering: Vec::new(),
            k: 10,
            gain: Gain::Linear,
            explain_pairs: 3,
            ablate_taus: (1..=9).map(|i| i as f64 / 10.0).collect(),
            ablate_ms: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSection {
    pub params: CostParams,
    pub question_counts: Vec<u64>,
    pub tiers: Vec<PriceTier>,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            params: CostParams::default(),
            question_counts: vec![2_000, 4_000, 6_000, 8_000, 10_000],
            tiers: vec![PriceTier::gpt_4o_mini(), PriceTier::gpt_4o()],
        }
    }
}

fn invalid(message: impl Into<String>) -> PipelineError {
    PipelineError::Config(message.into())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            PipelineError::Config(m) => invalid(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the canonical serialized form.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let c = &self.corpus;
        if !(c.heldout_fraction > 0.0 && c.heldout_fraction < 1.0) {
            return Err(invalid("corpus.heldout_fraction must be in (0, 1)"));
        }
        if self.encoder.dim < 2 {
            return Err(invalid("encoder.dim must be at least 2"));
        }
        if self.encoder.batch_size == 0 {
            return Err(invalid("encoder.batch_size must be positive"));
        }
        if self.cluster.k == 0 {
            return Err(invalid("cluster.k must be positive"));
        }
        if self.cluster.tol.is_nan() || self.cluster.tol < 0.0 {
            return Err(invalid("cluster.tol must be nonnegative"));
        }
        let q = &self.cqg;
        for (name, theta) in [("cqg.theta", q.theta), ("cqg.qaemb.theta", q.qaemb.theta)] {
            if !(-1.0..=1.0).contains(&theta) {
                return Err(invalid(format!("{name} must be in [-1, 1]")));
            }
        }
        if q.t == 0 {
            return Err(invalid("cqg.t must be positive"));
        }
        if q.sample.n_positive == 0 {
            return Err(invalid("cqg.sample.n_positive must be positive"));
        }
        if q.probe.p_positive == 0 || q.probe.p_hard + q.probe.p_easy == 0 {
            return Err(invalid("cqg.probe needs positive and negative probes"));
        }
        if q.method == GenerationMethod::Qaemb && q.qaemb_examples.is_empty() {
            return Err(invalid("cqg.qaemb_examples must not be empty"));
        }
        let m = &self.mbqa;
        if m.collect.group == 0 {
            return Err(invalid("mbqa.collect.group must be positive"));
        }
        if m.learning_rate.is_nan() || m.learning_rate <= 0.0 || m.hidden == 0 {
            return Err(invalid("mbqa.learning_rate and mbqa.hidden must be positive"));
        }
        if !(m.tau > 0.0 && m.tau < 1.0) {
            return Err(invalid("mbqa.tau must be in (0, 1)"));
        }
        if let Some(w) = m.pos_weight {
            if !(w.is_finite() && w > 0.0) {
                return Err(invalid("mbqa.pos_weight must be positive"));
            }
        }
        if self.eval.k == 0 {
            return Err(invalid("eval.k must be positive"));
        }
        if let Some(t) = self.eval.ablate_taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(invalid(format!("eval.ablate_taus entry {t} is outside (0, 1)")));
        }
        if self.eval.ablate_ms.contains(&0) {
            return Err(invalid("eval.ablate_ms entries must be positive"));
        }
        self.cost
            .params
            .validate()
            .map_err(|e| invalid(format!("cost.params: {e}")))?;
        if self.llm.kind == LlmKind::Scripted && self.llm.transcript.is_none() {
            return Err(invalid("llm.transcript is required for a scripted LLM"));
        }
        if self.llm.limits.max_parallel == 0 {
            return Err(invalid("llm.limits.max_parallel must be positive"));
        }
        Ok(())
    }
}

/// Resolve `path` against the directory of the config file.
pub(crate) fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
