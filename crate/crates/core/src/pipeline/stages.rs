use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{info, warn};

use super::artifacts::{load_dense, read_jsonl, save_dense, write_jsonl};
use super::config::{resolve, GenerationMethod, LlmKind, PipelineConfig};
use super::workspace::{hash_file, Provenance, State, Workspace};
use super::{io_err, PipelineError, Stage};
use crate::cluster::{kmeans_fit, ClusterModel, KMeans};
use crate::corpus::{exact_dedup, ingest, medi2_preprocess, split_heldout, Corpus, InputFormat};
use crate::cost::{comparison_table, mbqa_cost};
use crate::cqg::{
    dedup_in_order, generate_candidates, probe_all, qaemb_generate, select_question_bank,
    CandidateQuestion, CqgError, ProbeOutcome, QuestionBank, ScoredCandidate,
};
use crate::eval::{
    ablate_m, ablate_tau, clustering_evaluate, explain_pair, load_clustering, load_retrieval,
    load_sts, mean_cognitive_load, retrieval_evaluate, sts_evaluate, v_measure, AblationRow,
    DenseRows, EvalError, StsTask,
};
use crate::hashing::{derive_seed, hash_fields};
use crate::mbqa::{
    collect_answers, embed_documents, embed_texts, evaluate_heldout, probabilities, train_heads,
    MbqaError, MbqaHeads, TrainingConfig, TrainingExample,
};
use crate::providers::{
    cached, embed_all, mock_encoder, remote_llm, AnswerCache, EncoderProvider, LlmError,
    LlmProvider, MockEncoder, PromptCache, RecordingLlm, ScriptedLlm,
};
use crate::synthetic::TopicOracle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ran,
    Skipped,
}

/// One run-log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub status: Status,
    pub seconds: f64,
    pub counts: BTreeMap<String, Value>,
}

type Counts = BTreeMap<String, Value>;

struct Ctx {
    stage: Stage,
    seed: u64,
    provenance: Provenance,
}

struct Output {
    files: Vec<PathBuf>,
    counts: Counts,
}

fn failed(stage: Stage, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Failed {
        stage,
        message: e.to_string(),
    }
}

fn provider(stage: Stage, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Provider {
        stage,
        message: e.to_string(),
    }
}

fn cqg_err(stage: Stage) -> impl Fn(CqgError) -> PipelineError {
    move |e| match e {
        CqgError::Llm(e) => provider(stage, e),
        other => failed(stage, other),
    }
}

fn mbqa_err(stage: Stage) -> impl Fn(MbqaError) -> PipelineError {
    move |e| match e {
        MbqaError::Llm(e) => provider(stage, e),
        other => failed(stage, other),
    }
}

fn eval_err(stage: Stage) -> impl Fn(EvalError) -> PipelineError {
    move |e| match e {
        EvalError::Task { .. } | EvalError::Io { .. } => PipelineError::Config(e.to_string()),
        other => failed(stage, other),
    }
}

fn count(counts: &mut Counts, key: &str, v: impl Into<Value>) {
    counts.insert(key.to_owned(), v.into());
}

/// Runs stages of one configuration against one workspace.
pub struct Pipeline {
    cfg: PipelineConfig,
    base: PathBuf,
    ws: Workspace,
    force: bool,
    encoder: MockEncoder,
    injected: Option<Arc<dyn LlmProvider>>,
    llm: OnceLock<Arc<dyn LlmProvider>>,
    recorder: Option<Arc<RecordingLlm<Arc<dyn LlmProvider>>>>,
    record: bool,
}

impl Pipeline {
    /// `base` is the directory relative config paths are resolved against.
    pub fn new(cfg: PipelineConfig, base: impl Into<PathBuf>, workspace: Workspace) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let encoder = mock_encoder(cfg.encoder.seed, cfg.encoder.dim);
        Ok(Self {
            cfg,
            base: base.into(),
            ws: workspace,
            force: false,
            encoder,
            injected: None,
            llm: OnceLock::new(),
            recorder: None,
            record: false,
        })
    }

    pub fn force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    /// Use `llm` instead of the configured provider.
    pub fn with_llm(mut self, llm: Arc<dyn LlmProvider>) -> Self {
        self.injected = Some(llm);
        self
    }

    /// Keep every exchange so it can be written out with [`Pipeline::transcript_jsonl`].
    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    pub fn transcript_jsonl(&self) -> Option<String> {
        self.recorder.as_ref().map(|r| r.transcript_jsonl())
    }

    fn llm(&self, stage: Stage) -> Result<Arc<dyn LlmProvider>, PipelineError> {
        if let Some(l) = self.llm.get() {
            return Ok(l.clone());
        }
        let base: Arc<dyn LlmProvider> = match &self.injected {
            Some(l) => l.clone(),
            None => self.build_llm(stage)?,
        };
        let wrapped: Arc<dyn LlmProvider> = if self.cfg.llm.cache {
            let path = self.ws.path("cache/llm_cache.jsonl");
            let cache = PromptCache::open(&path).map_err(|e| failed(stage, e))?;
            Arc::new(cached(base, cache))
        } else {
            base
        };
        Ok(self.llm.get_or_init(|| wrapped).clone())
    }

    fn build_llm(&self, stage: Stage) -> Result<Arc<dyn LlmProvider>, PipelineError> {
        let l = &self.cfg.llm;
        Ok(match l.kind {
            LlmKind::Remote => {
                let secret = std::env::var(&l.secret_env).map_err(|_| {
                    PipelineError::Config(format!("environment variable {} holds no API secret", l.secret_env))
                })?;
                Arc::new(remote_llm(&l.endpoint, &l.model, &secret, l.limits.clone()).map_err(|e| provider(stage, e))?)
            }
            LlmKind::Scripted => {
                let path = resolve(&self.base, l.transcript.as_deref().expect("validated"));
                Arc::new(ScriptedLlm::load(&path).map_err(|e| match e {
                    LlmError::Io { .. } | LlmError::Transcript(_) => PipelineError::Config(e.to_string()),
                    other => provider(stage, other),
                })?)
            }
            LlmKind::TopicOracle => Arc::new(TopicOracle::default()),
        })
    }

    /// Provider used by a stage, wrapped in the recorder when enabled.
    fn stage_llm(&mut self, stage: Stage) -> Result<Arc<dyn LlmProvider>, PipelineError> {
        let inner = self.llm(stage)?;
        if !self.record {
            return Ok(inner);
        }
        let rec = self
            .recorder
            .get_or_insert_with(|| Arc::new(RecordingLlm::new(inner)))
            .clone();
        Ok(rec)
    }

    fn llm_identity(&self) -> Result<Value, PipelineError> {
        let l = &self.cfg.llm;
        Ok(match l.kind {
            LlmKind::Remote => json!({"kind": "remote", "endpoint": l.endpoint, "model": l.model}),
            LlmKind::Scripted => {
                let path = resolve(&self.base, l.transcript.as_deref().expect("validated"));
                let h = hash_file(&path).map_err(|e| PipelineError::Config(e.to_string()))?;
                json!({"kind": "scripted", "transcript": h})
            }
            LlmKind::TopicOracle => json!({"kind": "topic-oracle"}),
        })
    }

    fn hash_inputs(&self, paths: &[&Path]) -> Result<Vec<String>, PipelineError> {
        paths
            .iter()
            .map(|p| {
                hash_file(&resolve(&self.base, p))
                    .map_err(|_| PipelineError::Config(format!("cannot read input file {}", p.display())))
            })
            .collect()
    }

    fn eval_inputs(&self) -> Result<Value, PipelineError> {
        let e = &self.cfg.eval;
        let sts: Vec<&Path> = e.sts.iter().map(PathBuf::as_path).collect();
        let clu: Vec<&Path> = e.clustering.iter().map(PathBuf::as_path).collect();
        let mut ret = Vec::new();
        for r in &e.retrieval {
            ret.push(self.hash_inputs(&[&r.queries, &r.corpus, &r.qrels])?);
        }
        Ok(json!({
            "sts": self.hash_inputs(&sts)?,
            "retrieval": ret,
            "clustering": self.hash_inputs(&clu)?,
        }))
    }

    /// Everything besides upstream outputs that a stage's result depends on.
    fn stage_inputs(&self, stage: Stage) -> Result<Value, PipelineError> {
        let c = &self.cfg;
        let enc = serde_json::to_value(&c.encoder).expect("serializable");
        Ok(match stage {
            Stage::Ingest => {
                let files = match (&c.corpus.path, &c.corpus.medi2_dir) {
                    (Some(p), None) => self.hash_inputs(&[p])?,
                    (None, Some(d)) => {
                        let dir = resolve(&self.base, d);
                        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
                            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", d.display())))?
                            .filter_map(|e| e.ok().map(|e| e.path()))
                            .filter(|p| p.is_file())
                            .collect();
                        entries.sort();
                        let mut out = Vec::new();
                        for p in entries {
                            out.push(p.file_name().unwrap_or_default().to_string_lossy().into_owned());
                            out.push(hash_file(&p)?);
                        }
                        out
                    }
                    _ => {
                        return Err(PipelineError::Config(
                            "set exactly one of corpus.path and corpus.medi2_dir".into(),
                        ))
                    }
                };
                json!({"corpus": c.corpus, "files": files})
            }
            Stage::Encode => json!({"encoder": enc}),
            Stage::Cluster => json!({"cluster": c.cluster}),
            Stage::Generate => match c.cqg.method {
                GenerationMethod::Contrastive => json!({
                    "method": c.cqg.method, "sample": c.cqg.sample,
                    "params": c.llm.generation, "llm": self.llm_identity()?,
                }),
                GenerationMethod::Qaemb => json!({
                    "method": c.cqg.method, "qaemb": c.cqg.qaemb, "examples": c.cqg.qaemb_examples,
                    "params": c.llm.generation, "llm": self.llm_identity()?, "encoder": enc,
                }),
            },
            Stage::Probe => match c.cqg.method {
                GenerationMethod::Contrastive => json!({
                    "method": c.cqg.method, "probe": c.cqg.probe,
                    "params": c.llm.answering, "llm": self.llm_identity()?,
                }),
                GenerationMethod::Qaemb => json!({"method": c.cqg.method}),
            },
            Stage::Select => json!({
                "method": c.cqg.method, "theta": c.cqg.theta, "t": c.cqg.t,
                "qaemb_theta": c.cqg.qaemb.theta, "encoder": enc,
            }),
            Stage::Collect => json!({
                "collect": c.mbqa.collect, "params": c.llm.answering, "llm": self.llm_identity()?,
            }),
            Stage::Train => json!({
                "learning_rate": c.mbqa.learning_rate, "steps": c.mbqa.steps, "hidden": c.mbqa.hidden,
                "pos_weight": c.mbqa.pos_weight, "tau": c.mbqa.tau,
                "heldout_fraction": c.corpus.heldout_fraction, "encoder": enc,
            }),
            Stage::Embed => json!({"tau": c.mbqa.tau, "encoder": enc}),
            Stage::EvalSts | Stage::EvalRetrieval | Stage::EvalClustering => json!({
                "tau": c.mbqa.tau, "encoder": enc, "k": c.eval.k, "gain": c.eval.gain,
                "inputs": self.eval_inputs()?,
            }),
            Stage::Explain => json!({
                "tau": c.mbqa.tau, "encoder": enc, "pairs": c.eval.explain_pairs,
                "inputs": self.eval_inputs()?,
            }),
            Stage::Ablate => json!({
                "tau": c.mbqa.tau, "encoder": enc, "taus": c.eval.ablate_taus, "ms": c.eval.ablate_ms,
                "inputs": self.eval_inputs()?,
            }),
            Stage::Cost => json!({"cost": c.cost}),
        })
    }

    fn input_fingerprint(&self, stage: Stage, state: &State) -> Result<String, PipelineError> {
        let inputs = self.stage_inputs(stage)?.to_string();
        let seed = self.cfg.seed.to_le_bytes();
        let mut fields: Vec<Vec<u8>> = vec![stage.name().into(), seed.to_vec(), inputs.into_bytes()];
        for dep in stage.dependencies() {
            let rec = self.ws.require(state, stage, *dep)?;
            fields.push(dep.name().into());
            fields.push(rec.output_fingerprint().into_bytes());
        }
        Ok(hash_fields(fields.iter().map(Vec::as_slice)))
    }

    /// Dependencies must be recorded, intact and up to date with their own
    /// inputs.
    fn check_upstream(&self, stage: Stage, state: &State) -> Result<(), PipelineError> {
        for &dep in stage.dependencies() {
            let rec = self.ws.require(state, stage, dep)?;
            if self.force {
                continue;
            }
            if let Some(detail) = self.ws.verify(rec) {
                return Err(PipelineError::Mismatch {
                    stage,
                    upstream: dep,
                    detail,
                });
            }
            let now = self.input_fingerprint(dep, state)?;
            if now != rec.input_fingerprint {
                return Err(PipelineError::Mismatch {
                    stage,
                    upstream: dep,
                    detail: format!("the inputs of {dep} changed"),
                });
            }
        }
        Ok(())
    }

    fn provenance(&self, stage: Stage, input: &str, state: &State) -> Provenance {
        let mut stages = BTreeMap::new();
        for up in stage.upstream() {
            if let Some(r) = state.stages.get(up.name()) {
                stages.insert(up.name().to_owned(), r.output_fingerprint());
            }
        }
        stages.insert(stage.name().to_owned(), input.to_owned());
        Provenance {
            config_hash: self.cfg.hash(),
            stages,
        }
    }

    /// Run the given stages in order under the workspace lock.
    pub fn run(&mut self, stages: &[Stage]) -> Result<Vec<StageSummary>, PipelineError> {
        let _lock = self.ws.lock()?;
        let cfg_path = self.ws.path("config.toml");
        fs::write(&cfg_path, self.cfg.to_toml()).map_err(io_err(&cfg_path))?;
        let mut out = Vec::new();
        for &s in stages {
            out.push(self.run_locked(s)?);
        }
        Ok(out)
    }

    pub fn run_all(&mut self) -> Result<Vec<StageSummary>, PipelineError> {
        self.run(&Stage::ALL)
    }

    fn run_locked(&mut self, stage: Stage) -> Result<StageSummary, PipelineError> {
        let start = Instant::now();
        let mut state = self.ws.state()?;
        self.check_upstream(stage, &state)?;
        let input = self.input_fingerprint(stage, &state)?;
        if let Some(rec) = state.stages.get(stage.name()) {
            if rec.input_fingerprint == input && self.ws.verify(rec).is_none() {
                info!(stage = stage.name(), "unchanged; skipped");
                return self.log(stage, Status::Skipped, start, Counts::new());
            }
            if rec.input_fingerprint != input && !self.force {
                return Err(PipelineError::Refused { stage });
            }
        }
        state.stages.remove(stage.name());
        self.ws.save_state(&state)?;

        info!(stage = stage.name(), "running");
        let ctx = Ctx {
            stage,
            seed: derive_seed(self.cfg.seed, stage.name()),
            provenance: self.provenance(stage, &input, &state),
        };
        let out = self.execute(&ctx)?;
        let record = self.ws.record(input, &out.files)?;
        state.stages.insert(stage.name().to_owned(), record);
        self.ws.save_state(&state)?;
        self.log(stage, Status::Ran, start, out.counts)
    }

    fn log(&self, stage: Stage, status: Status, start: Instant, counts: Counts) -> Result<StageSummary, PipelineError> {
        let s = StageSummary {
            stage: stage.name().to_owned(),
            status,
            seconds: start.elapsed().as_secs_f64(),
            counts,
        };
        self.ws.append_log(&serde_json::to_value(&s).expect("serializable"))?;
        Ok(s)
    }

    fn execute(&mut self, ctx: &Ctx) -> Result<Output, PipelineError> {
        match ctx.stage {
            Stage::Ingest => self.ingest(ctx),
            Stage::Encode => self.encode(ctx),
            Stage::Cluster => self.cluster(ctx),
            Stage::Generate => self.generate(ctx),
            Stage::Probe => self.probe(ctx),
            Stage::Select => self.select(ctx),
            Stage::Collect => self.collect(ctx),
            Stage::Train => self.train(ctx),
            Stage::Embed => self.embed(ctx),
            Stage::EvalSts => self.eval_sts(ctx),
            Stage::EvalRetrieval => self.eval_retrieval(ctx),
            Stage::EvalClustering => self.eval_clustering(ctx),
            Stage::Explain => self.explain(ctx),
            Stage::Ablate => self.ablate(ctx),
            Stage::Cost => self.cost(ctx),
        }
    }

    // ---- artifact access ----

    fn corpus(&self, stage: Stage) -> Result<Corpus, PipelineError> {
        ingest(&self.ws.artifact("corpus.jsonl"), InputFormat::JsonLines)
            .map(|i| i.corpus)
            .map_err(|e| failed(stage, e))
    }

    fn model(&self, stage: Stage) -> Result<ClusterModel, PipelineError> {
        ClusterModel::load(&self.ws.artifact("centroids.bin"), &self.ws.artifact("assignments.jsonl"))
            .map_err(|e| failed(stage, e))
    }

    fn bank(&self, stage: Stage) -> Result<QuestionBank, PipelineError> {
        QuestionBank::load(&self.ws.artifact("bank.jsonl")).map_err(|e| failed(stage, e))
    }

    fn heads(&self, stage: Stage) -> Result<MbqaHeads, PipelineError> {
        MbqaHeads::load(&self.ws.artifact("heads.qmbh")).map_err(|e| failed(stage, e))
    }

    fn write_report(
        &self,
        ctx: &Ctx,
        name: &str,
        text: &str,
        markdown: &str,
        records: &[Value],
    ) -> Result<Vec<PathBuf>, PipelineError> {
        let p = &ctx.provenance;
        let txt = self.ws.report(&format!("{name}.txt"));
        let md = self.ws.report(&format!("{name}.md"));
        let jl = self.ws.report(&format!("{name}.jsonl"));
        fs::write(&txt, format!("{}\n{text}", p.to_text())).map_err(io_err(&txt))?;
        fs::write(&md, format!("{}\n{markdown}", p.to_markdown())).map_err(io_err(&md))?;
        let mut lines = vec![json!({"provenance": p})];
        lines.extend_from_slice(records);
        write_jsonl(&jl, &lines)?;
        Ok(vec![txt, md, jl])
    }

    // ---- stages ----

    fn ingest(&mut self, ctx: &Ctx) -> Result<Output, PipelineError> {
        let c = &self.cfg.corpus;
        let (corpus, skipped) = match (&c.path, &c.medi2_dir) {
            (Some(p), None) => {
                let got = ingest(&resolve(&self.base, p), c.format).map_err(|e| failed(ctx.stage, e))?;
                for s in &got.skipped {
                    warn!(line = s.line, reason = %s.reason, "skipped corpus record");
                }
                (got.corpus, got.skipped.len())
            }
            (None, Some(d)) => {
                let got = medi2_preprocess(&resolve(&self.base, d), &c.instruction_delimiter)
                    .map_err(|e| failed(ctx.stage, e))?;
                (got.corpus, got.skipped.len())
            }
            _ => unreachable!("checked while fingerprinting"),
        };
        let before = corpus.len();
        let corpus = if c.dedup { exact_dedup(corpus) } else { corpus };
        if corpus.is_empty() {
            return Err(failed(ctx.stage, "corpus is empty"));
        }
        let path = self.ws.artifact("corpus.jsonl");
        corpus.write_jsonl(&path).map_err(|e| failed(ctx.stage, e))?;
        let mut counts = Counts::new();
        count(&mut counts, "documents", corpus.len());
        count(&mut counts, "duplicates_removed", before - corpus.len());
        count(&mut counts, "skipped", skipped);
        Ok(Output {
            files: vec![path],
            counts,
        })
    }

    fn encode(&mut self, ctx: &Ctx) -> Result<Output, PipelineError> {
        let corpus = self.corpus(ctx.stage)?;
        let texts: Vec<&str> = corpus.documents().iter().map(|d| d.text.as_str()).collect();
        let rows = embed_all(&self.encoder, &texts, self.cfg.encoder.batch_size).map_err(|e| failed(ctx.stage, e))?;
        let ids: Vec<String> = corpus.ids().map(String::from).collect();
        let path = self.ws.artifact("embeddings.qemb");
        save_dense(&path, &self.encoder.fingerprint(), &ids, &rows)?;
        let mut counts = Counts::new();
        count(&mut counts, "documents", rows.len());
        count(&mut counts, "dim", self.encoder.dimension());
        Ok(Output {
            files: vec![path],
            counts,
        })
    }

    fn cluster(&mut self, ctx: &Ctx) -> Result<Output, PipelineError> {
        let (_, ids, rows) = load_dense(&self.ws.artifact("embeddings.qemb"))?;
        let c = &self.cfg.cluster;
        let params = KMeans {
            k: c.k,
            seed: ctx.seed,
            max_iters: c.max_iters,
            tol: c.tol,
            renormalize: c.renormalize_centroids,
        };
        let (model, _) = kmeans_fit(&ids, &rows, &params).map_err(|e| failed(ctx.stage, e))?;
        let (cen, asg) = (self.ws.artifact("centroids.bin"), self.ws.artifact("assignments.jsonl"));
        model.save(&cen, &asg).map_err(|e| failed(ctx.stage, e))?;
        let mut sizes = vec![0usize; model.k];
        for &a in model.assignments() {
            sizes[a] += 1;
        }
        let mut counts = Counts::new();
        count(&mut counts, "k", model.k);
        count(&mut counts, "inertia", model.inertia);
        count(&mut counts, "smallest_cluster", sizes.iter().min().copied().unwrap_or(0));
        count(&mut counts, "largest_cluster", sizes.iter().max().copied().unwrap_or(0));
        Ok(Output {
            files: vec![cen, asg],
            counts,
        })
    }

    fn generate(&mut self, ctx: &Ctx) -> Result<Output, PipelineError> {
        let stage = ctx.stage;
        let corpus = self.corpus(stage)?;
        let llm = self.stage_llm(stage)?;
        let params = self.cfg.llm.generation.clone();
        let cand_path = self.ws.artifact("candidates.jsonl");
        let sample_path = self.ws.artifact("samples.jsonl");
        let mut counts = Counts::new();
        match self.cfg.cqg.method {
            GenerationMethod::Contrastive => {
                let model = self.model(stage)?;
                let out = generate_candidates(&corpus, &model, &llm, &self.cfg.cqg.sample, &params, ctx.seed)
                    .map_err(cqg_err(stage))?;
                for (c, why) in &out.failed {
                    warn!(cluster = c, reason = %why, "generation failed for cluster");
                }
                if out.candidates.is_empty() {
                    let why = out.failed.first().map_or("no questions were produced".to_owned(), |f| f.1.clone());
                    return Err(provider(stage, why));
                }
                write_jsonl(&cand_path, &out.candidates)?;
                write_jsonl(&sample_path, &out.samples)?;
                count(&mut counts, "candidates", out.candidates.len());
                count(&mut counts, "failed_clusters", out.failed.len());
            }
            GenerationMethod::Qaemb => {
                let q = &self.cfg.cqg;
                let bank = qaemb_generate(&corpus, &q.qaemb_examples, &llm, &self.encoder, &q.qaemb, &params, ctx.seed)
                    .map_err(cqg_err(stage))?;
                let cands: Vec<CandidateQuestion> = bank
                    .questions()
                    .iter()
                    .map(|b| CandidateQuestion {
                        text: b.text.clone(),
                        origin_cluster: None,
                        ordinal: b.id,
                    })
                    .collect();
                write_jsonl(&cand_path, &cands)?;
                write_jsonl::<Value>(&sample_path, &[])?;
                count(&mut counts, "candidates", cands.len());
            }
        }
        Ok(Output {
            files: vec![cand_path, sample_path],
            counts,
        })
    }

    fn probe(&mut self, ctx: &Ctx) -> Result<Output, PipelineError> {
        let stage = ctx.stage;
        let candidates: Vec<CandidateQuestion> = read_jsonl(&self.ws.artifact("candidates.jsonl"))?;
        let outcomes: Vec<Option<ProbeOutcome>> = match self.cfg.cqg.method {
            GenerationMethod::Contrastive => {
                let corpus = self.corpus(stage)?;
                let model = self.model(stage)?;
                let llm = self.stage_llm(stage)?;
                let out = probe_all(
                    &candidates,
                    &corpus,
                    &model,
                    &llm,
                    &self.cfg.cqg.probe,
                    &self.cfg.llm.answering,
                    ctx.seed,
                )
                .map_err(cqg_err(stage))?;
                if !out.is_empty() && out.iter().all(Option::is_none) {
                    return Err(provider(stage, "every probe failed"));
                }
                out
            }
            GenerationMethod::Qaemb => vec![None; candidates.len()],
        };
        let path = self.ws.artifact("probes.jsonl");
        write_jsonl(&path, &outcomes)?;
        let probed: Vec<&ProbeOutcome> = outcomes.iter().flatten().collect();
        let mut counts = Counts::new();
        count(&mut counts, "probed", probed.len());
        count(&mut counts, "unprobed", outcomes.len() - probed.len());
        count(&mut counts, "unparsed_answers", probed.iter().map(|p| p.unparsed).sum::<usize>());
        if !probed.is_empty() {
            let mean = probed.iter().map(|p| p.quality).sum::<f64>() / probed.len() as f64;
            count(&mut counts, "mean_quality", mean);
        }
        Ok(Output {
            files: vec![path],
            counts,
        })
    }

    fn select(&mut self, ctx: &Ctx) -> Result<Output, PipelineError> {
        let stage = ctx.stage;
        let candidates: Vec<CandidateQuestion> = read_jsonl(&self.ws.artifact("candidates.jsonl"))?;
        let q = &self.cfg.cqg;
        let bank = match q.method {
            GenerationMethod::Contrastive => {
                let probes: Vec<Option<ProbeOutcome>> = read_jsonl(&self.ws.artifact("probes.jsonl"))?;
                if probes.len() != candidates.len() {
                    return Err(failed(stage, "probe outcomes do not line up with the candidates"));
                }
                let scored: Vec<ScoredCandidate> = candidates
                    .iter()
                    .zip(&probes)
                    .filter_map(|(c, p)| {
                        p.as_ref().map(|p| ScoredCandidate {
                            question: c.clone(),
                            quality: p.quality,
                        })
                    })
                    .collect();
                select_question_bank(&scored, &self.encoder, q.theta, q.t).map_err(cqg_err(stage))?
            }
            GenerationMethod::Qaemb => {
                let texts: Vec<&str> = candidates.iter().map(|c| c.text.as_str()).collect();
                dedup_in_order(&texts, &self.encoder, q.qaemb.theta).map_err(cqg_err(stage))?
            }
        };
        if bank.is_empty() {
            return Err(failed(stage, "question bank is empty"));
        }
        let path = self.ws.artifact("bank.jsonl");
        bank.save(&path).map_err(cqg_err(stage))?;
        let mut counts = Counts::new();
        count(&mut counts, "candidates", candidates.len());
        count(&mut counts, "questions", bank.m());
        Ok(Output {
            files: vec![path],
            counts,
        })
    }

    fn collect(&mut self, ctx: &Ctx) -> Result<Output, PipelineError> {
        let stage = ctx.stage;
        let corpus = self.corpus(stage)?;
        let model = self.model(stage)?;
        let bank = self.bank(stage)?;
        let llm = self.stage_llm(stage)?;
        let cache_path = self.ws.path(&format!("cache/answers-{}.jsonl", &bank.fingerprint()[..16]));
        let cache = AnswerCache::open(&cache_path).map_err(|e| failed(stage, e))?;
        let out = collect_answers(
            &corpus,
            &bank,
            &model,
            &llm,
            &cache,
            &self.cfg.mbqa.collect,
            &self.cfg.llm.answering,
            ctx.seed,
        )
        .map_err(mbqa_err(stage))?;
        let mut examples = out.examples;
        examples.sort_by(|a, b| a.document_id.cmp(&b.document_id));
        let path = self.ws.artifact("examples.jsonl");
        write_jsonl(&path, &examples)?;
        let mut counts = Counts::new();
        count(&mut counts, "documents", examples.len());
        count(&mut counts, "answers", examples.iter().map(|e| e.answers.len()).sum::<usize>());
        count(&mut counts, "prompts_sent", out.prompts_sent);
        count(&mut counts, "cache_hits", out.cache_hits);
        count(&mut counts, "unparsed_answers", out.unparsed);
        Ok(Output {
            files: vec![path],
            counts,
        })
    }

    fn train(&mut self, ctx: &Ctx) -> Result<Output, PipelineError> {
        let stage = ctx.stage;
        let corpus = self.corpus(stage)?;
        let bank = self.bank(stage)?;
        let examples: Vec<TrainingExample> = read_jsonl(&self.ws.artifact("examples.jsonl"))?;
        let split = split_heldout(&corpus, self.cfg.corpus.heldout_fraction, derive_seed(ctx.seed, "split"))
            .map_err(|e| failed(stage, e))?;
        let (train, heldout): (Vec<TrainingExample>, Vec<TrainingExample>) = examples
            .into_iter()
            .partition(|e| split.train_ids.contains(&e.document_id));
        let m = &self.cfg.mbqa;
        let tc = TrainingConfig {
            learning_rate: m.learning_rate,
            steps: m.steps,
            pos_weight: m.pos_weight,
            hidden: m.hidden,
            seed: derive_seed(ctx.seed, "heads"),
            tau: m.tau,
            log_every: m.log_every,
        };
        let out = train_heads(&train, &corpus, &self.encoder, &bank, &tc).map_err(mbqa_err(stage))?;
        let heads_path = self.ws.artifact("heads.qmbh");
        out.heads.save(&heads_path).map_err(mbqa_err(stage))?;
        let curve: Vec<Value> = out.loss_curve.iter().map(|(s, l)| json!({"step": s, "loss": l})).collect();
        let curve_path = self.ws.artifact("loss.jsonl");
        write_jsonl(&curve_path, &curve)?;

        let report = match evaluate_heldout(&out.heads, &self.encoder, &corpus, &heldout, m.tau) {
            Ok(r) => Some(r),
            Err(MbqaError::EmptyHeldout) => None,
            Err(e) => return Err(mbqa_err(stage)(e)),
        };
        let mut text = format!(
            "questions {}\ntraining documents {}\nheld-out documents {}\npos_weight {:.4}\n\n",
            bank.m(),
            train.len(),
            heldout.len(),
            out.pos_weight
        );
        let mut md = format!(
            "# Head training\n\n- questions: {}\n- training documents: {}\n- held-out documents: {}\n- pos_weight: {:.4}\n\n",
            bank.m(),
            train.len(),
            heldout.len(),
            out.pos_weight
        );
        match &report {
            Some(r) => {
                text.push_str(&r.to_string());
                md.push_str(&r.to_markdown());
            }
            None => {
                text.push_str("no held-out answers\n");
                md.push_str("No held-out answers.\n");
            }
        }
        let record = json!({
            "questions": bank.m(), "train_documents": train.len(), "heldout_documents": heldout.len(),
            "pos_weight": out.pos_weight, "heldout": report,
        });
        let mut files = vec![heads_path, curve_path];
        files.extend(self.write_report(ctx, "train", &text, &md, &[record])?);
        let mut counts = Counts::new();
        count(&mut counts, "steps", m.steps);
        count(&mut counts, "pos_weight", out.pos_weight);
        if let Some(r) = &report {
            count(&mut counts, "heldout_accuracy", r.accuracy);
        }
        Ok(Output { files, counts })
    }

    fn embed(&mut self, ctx: &Ctx) -> Result<Output, PipelineError> {
        let corpus = self.corpus(ctx.stage)?;
        let heads = self.heads(ctx.stage)?;
        let matrix = embed_documents(corpus.documents(), &self.encoder, &heads, self.cfg.mbqa.tau)
            .map_err(mbqa_err(ctx.stage))?;
        let path = self.ws.artifact("embeddings.qbin");
        matrix.save(&path).map_err(|e| failed(ctx.stage, e))?;
        let mut counts = Counts::new();
        count(&mut counts, "documents", matrix.n());
        count(&mut counts, "dimensions", matrix.m());
        let ones: u64 = (0..matrix.n()).map(|r| matrix.popcount(r) as u64).sum();
        count(&mut counts, "mean_active_dimensions", ones as f64 / matrix.n().max(1) as f64);
        Ok(Output {
            files: vec![path],
            counts,
        })
    }

    fn binary(&self, stage: Stage, prefix: &str, texts: &[&str], heads: &MbqaHeads) -> Result<crate::binary::BinaryMatrix, PipelineError> {
        let ids: Vec<String> = (0..texts.len()).map(|i| format!("{prefix}{i}")).collect();
        embed_texts(&ids, texts, &self.encoder, heads, self.cfg.mbqa.tau).map_err(mbqa_err(stage))
    }

    fn dense(&self, stage: Stage, texts: &[&str]) -> Result<DenseRows, PipelineError> {
        embed_all(&self.encoder, texts, self.cfg.encoder.batch_size)
            .map(DenseRows)
            .map_err(|e| failed(stage, e))
    }

    fn sts_tasks(&self) -> Result<Vec<StsTask>, PipelineError> {
        self.cfg
            .eval
            .sts
            .iter()
            .map(|p| load_sts(&resolve(&self.base, p)).map_err(eval_err(Stage::EvalSts)))
            .collect()
    }

    fn eval_sts(&mut self, ctx: &Ctx) -> Result<Output, PipelineError> {
        let stage = ctx.stage;
        let heads = self.heads(stage)?;
        let mut records = Vec::new();
        let mut text = format!("{:<24}{:>10}{:>10}{:>10}\n", "task", "binary", "dense", "load");
        let mut md = String::from("# STS\n\nSpearman x 100 and mean cognitive load.\n\n| Task | Binary | Dense | Load |\n|---|---:|---:|---:|\n");
        for task in self.sts_tasks()? {
            let a: Vec<&str> = task.pairs.iter().map(|p| p.text_a.as_str()).collect();
            let b: Vec<&str> = task.pairs.iter().map(|p| p.text_b.as_str()).collect();
            let (ba, bb) = (self.binary(stage, "a", &a, &heads)?, self.binary(stage, "b", &b, &heads)?);
            let bin = sts_evaluate(&task, &ba, &bb).map_err(eval_err(stage))?;
            let load = mean_cognitive_load(&ba, &bb).map_err(eval_err(stage))?;
            let den = sts_evaluate(&task, &self.dense(stage, &a)?, &self.dense(stage, &b)?).map_err(eval_err(stage))?;
            let _ = writeln!(text, "{:<24}{:>10.2}{:>10.2}{:>10.2}", task.name, bin.spearman_x100, den.spearman_x100, load.mean);
            let _ = writeln!(md, "| {} | {:.2} | {:.2} | {:.2} |", task.name, bin.spearman_x100, den.spearman_x100, load.mean);
            records.push(json!({
                "task": task.name, "pairs": bin.pairs, "binary_spearman": bin.spearman,
                "dense_spearman": den.spearman, "mean_cognitive_load": load.mean,
            }));
        }
        let mut counts = Counts::new();
        count(&mut counts, "tasks", records.len());
        if let Some(first) = records.first() {
            count(&mut counts, "binary_spearman", first["binary_spearman"].clone());
        }
        let files = self.write_report(ctx, "eval-sts", &text, &md, &records)?;
        Ok(Output { files, counts })
    }

    fn eval_retrieval(&mut self, ctx: &Ctx) -> Result<Output, PipelineError> {
        let stage = ctx.stage;
        let heads = self.heads(stage)?;
        let (k, gain) = (self.cfg.eval.k, self.cfg.eval.gain);
        let mut records = Vec::new();
        let mut text = format!("{:<24}{:>10}{:>10}\n", "task", "binary", "dense");
        let mut md = format!("# Retrieval\n\nnDCG@{k} x 100.\n\n| Task | Binary | Dense |\n|---|---:|---:|\n");
        for files in &self.cfg.eval.retrieval {
            let task = load_retrieval(
                &resolve(&self.base, &files.queries),
                &resolve(&self.base, &files.corpus),
                &resolve(&self.base, &files.qrels),
            )
            .map_err(eval_err(stage))?;
            let q: Vec<&str> = task.queries.iter().map(|t| t.text.as_str()).collect();
            let c: Vec<&str> = task.corpus.iter().map(|t| t.text.as_str()).collect();
            let bin = retrieval_evaluate(&task, &self.binary(stage, "q", &q, &heads)?, &self.binary(stage, "d", &c, &heads)?, k, gain)
                .map_err(eval_err(stage))?;
            let den = retrieval_evaluate(&task, &self.dense(stage, &q)?, &self.dense(stage, &c)?, k, gain)
                .map_err(eval_err(stage))?;
            let _ = writeln!(text, "{:<24}{:>10.2}{:>10.2}", task.name, bin.ndcg * 100.0, den.ndcg * 100.0);
            let _ = writeln!(md, "| {} | {:.2} | {:.2} |", task.name, bin.ndcg * 100.0, den.ndcg * 100.0);
            records.push(json!({
                "task": task.name, "k": k, "queries": task.queries.len(),
                "binary_ndcg": bin.ndcg, "dense_ndcg": den.ndcg,
            }));
        }
        let mut counts = Counts::new();
        count(&mut counts, "tasks", records.len());
        let files = self.write_report(ctx, "eval-retrieval", &text, &md, &records)?;
        Ok(Output { files, counts })
    }

    fn eval_clustering(&mut self, ctx: &Ctx) -> Result<Output, PipelineError> {
        let stage = ctx.stage;
        let heads = self.heads(stage)?;
        let mut records = Vec::new();
        let mut text = format!("{:<24}{:>10}{:>10}\n", "task", "binary", "dense");
        let mut md = String::from("# Clustering\n\nV-measure x 100.\n\n| Task | Binary | Dense |\n|---|---:|---:|\n");
        for p in &self.cfg.eval.clustering {
            let task = load_clustering(&resolve(&self.base, p)).map_err(eval_err(stage))?;
            let texts: Vec<&str> = task.items.iter().map(|i| i.text.as_str()).collect();
            let labels: Vec<String> = task.items.iter().map(|i| i.label.clone()).collect();
            let seed = derive_seed(ctx.seed, &task.name);
            let bin = clustering_evaluate(&self.binary(stage, "c", &texts, &heads)?, &labels, seed)
                .map_err(eval_err(stage))?;
            let k = labels.iter().collect::<HashSet<_>>().len();
            let rows: Vec<Vec<f32>> = self.dense(stage, &texts)?.0.into_iter().map(|e| e.0).collect();
            let fit = KMeans::new(k, seed).fit(&rows).map_err(|e| failed(stage, e))?;
            let den = v_measure(&labels, &fit.labels).map_err(eval_err(stage))?;
            let _ = writeln!(text, "{:<24}{:>10.2}{:>10.2}", task.name, bin.v * 100.0, den.v * 100.0);
            let _ = writeln!(md, "| {} | {:.2} | {:.2} |", task.name, bin.v * 100.0, den.v * 100.0);
            records.push(json!({
                "task": task.name, "items": labels.len(), "binary_v_measure": bin.v, "dense_v_measure": den.v,
            }));
        }
        let mut counts = Counts::new();
        count(&mut counts, "tasks", records.len());
        let files = self.write_report(ctx, "eval-clustering", &text, &md, &records)?;
        Ok(Output { files, counts })
    }

    fn explain(&mut self, ctx: &Ctx) -> Result<Output, PipelineError> {
        let stage = ctx.stage;
        let heads = self.heads(stage)?;
        let bank = self.bank(stage)?;
        let mut text = String::new();
        let mut md = String::from("# Explanations\n\n");
        let mut records = Vec::new();
        match self.sts_tasks()?.into_iter().next() {
            None => {
                text.push_str("no STS task configured\n");
                md.push_str("No STS task configured.\n");
            }
            Some(task) => {
                let pairs = &task.pairs[..self.cfg.eval.explain_pairs.min(task.pairs.len())];
                let a: Vec<&str> = pairs.iter().map(|p| p.text_a.as_str()).collect();
                let b: Vec<&str> = pairs.iter().map(|p| p.text_b.as_str()).collect();
                let (ba, bb) = (self.binary(stage, "a", &a, &heads)?, self.binary(stage, "b", &b, &heads)?);
                for (i, p) in pairs.iter().enumerate() {
                    let r = explain_pair(&p.text_a, &ba.row(i), &p.text_b, &bb.row(i), &heads.bank_fingerprint, &bank)
                        .map_err(eval_err(stage))?;
                    let _ = writeln!(text, "pair {} (gold {})\n{}", i + 1, p.score, r.to_text());
                    let _ = writeln!(md, "## Pair {} (gold {})\n\n{}", i + 1, p.score, r.to_markdown());
                    records.push(json!({"pair": i, "gold": p.score, "explanation": r}));
                }
            }
        }
        let mut counts = Counts::new();
        count(&mut counts, "pairs", records.len());
        let files = self.write_report(ctx, "explain", &text, &md, &records)?;
        Ok(Output { files, counts })
    }

    fn ablate(&mut self, ctx: &Ctx) -> Result<Output, PipelineError> {
        let stage = ctx.stage;
        let heads = self.heads(stage)?;
        let mut rows: Vec<AblationRow> = Vec::new();
        let task = self.sts_tasks()?.into_iter().next();
        if let Some(task) = &task {
            let a: Vec<&str> = task.pairs.iter().map(|p| p.text_a.as_str()).collect();
            let b: Vec<&str> = task.pairs.iter().map(|p| p.text_b.as_str()).collect();
            let pa = probabilities(&heads, &self.dense(stage, &a)?.0).map_err(mbqa_err(stage))?;
            let pb = probabilities(&heads, &self.dense(stage, &b)?.0).map_err(mbqa_err(stage))?;
            rows.extend(
                ablate_tau(task, &pa, &pb, heads.m, &heads.bank_fingerprint, &self.cfg.eval.ablate_taus)
                    .map_err(eval_err(stage))?,
            );
            let mut ms = self.cfg.eval.ablate_ms.clone();
            if ms.is_empty() {
                ms = [8, 4, 2, 1].iter().map(|d| (heads.m / d).max(1)).collect();
                ms.dedup();
            }
            if let Some(m) = ms.iter().find(|&&m| m > heads.m) {
                return Err(PipelineError::Config(format!(
                    "eval.ablate_ms entry {m} exceeds the {} trained dimensions",
                    heads.m
                )));
            }
            let (ba, bb) = (self.binary(stage, "a", &a, &heads)?, self.binary(stage, "b", &b, &heads)?);
            rows.extend(ablate_m(task, &ba, &bb, &ms).map_err(eval_err(stage))?);
        }
        let mut text = String::new();
        let mut md = String::from("# Ablation\n\n");
        match &task {
            None => {
                text.push_str("no STS task configured\n");
                md.push_str("No STS task configured.\n");
            }
            Some(t) => {
                let _ = writeln!(text, "task {}\n{:<8}{:>10}{:>12}{:>12}", t.name, "sweep", "value", "spearman", "load");
                let _ = writeln!(md, "Task: {}\n\n| Sweep | Value | Spearman x 100 | Mean cognitive load |\n|---|---:|---:|---:|", t.name);
                for r in &rows {
                    let _ = writeln!(text, "{:<8}{:>10}{:>12.2}{:>12.2}", r.setting.to_string(), r.value, r.spearman * 100.0, r.mean_cognitive_load);
                    let _ = writeln!(md, "| {} | {} | {:.2} | {:.2} |", r.setting, r.value, r.spearman * 100.0, r.mean_cognitive_load);
                }
            }
        }
        let records: Vec<Value> = rows.iter().map(|r| serde_json::to_value(r).expect("serializable")).collect();
        let mut counts = Counts::new();
        count(&mut counts, "points", rows.len());
        let files = self.write_report(ctx, "ablate", &text, &md, &records)?;
        Ok(Output { files, counts })
    }

    fn cost(&mut self, ctx: &Ctx) -> Result<Output, PipelineError> {
        let c = &self.cfg.cost;
        let table = comparison_table(&c.params, &c.question_counts, &c.tiers)
            .map_err(|e| PipelineError::Config(format!("cost: {e}")))?;
        let mut text = table.to_string();
        let mut md = format!("# Cost\n\n{}\n| Questions | MBQA API | MBQA GPU | MBQA total |\n|---:|---:|---:|---:|\n", table.to_markdown());
        text.push('\n');
        let mut records: Vec<Value> = serde_json::Deserializer::from_str(&table.to_jsonl())
            .into_iter::<Value>()
            .map(|v| v.expect("own output parses"))
            .collect();
        for &q in &c.question_counts {
            let m = mbqa_cost(&c.params.with_questions(q)).map_err(|e| PipelineError::Config(format!("cost: {e}")))?;
            let _ = writeln!(text, "MBQA {q}: api ${:.2}, gpu ${:.2}, total ${:.2}", m.api_usd, m.gpu_usd, m.total);
            let _ = writeln!(md, "| {q} | ${:.2} | ${:.2} | ${:.2} |", m.api_usd, m.gpu_usd, m.total);
            records.push(json!({"mbqa_breakdown": q, "api_usd": m.api_usd, "gpu_usd": m.gpu_usd, "total": m.total}));
        }
        let mut counts = Counts::new();
        count(&mut counts, "rows", table.rows.len());
        let files = self.write_report(ctx, "cost", &text, &md, &records)?;
        Ok(Output { files, counts })
    }
}

