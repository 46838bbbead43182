//! Desk-scale preset: a 200-document corpus over four topics, evaluation
//! tasks from the same world, and a recorded LLM transcript.

use std::fs;
use std::path::{Path, PathBuf};

use super::stages::{Pipeline, StageSummary};
use super::workspace::Workspace;
use super::{io_err, LlmKind, PipelineConfig, PipelineError};
use super::artifacts::to_jsonl as jsonl;
use crate::synthetic;

pub const CONFIG_FILE: &str = "demo.toml";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";

/// Bundled inputs, written to `<workspace>/inputs` by [`write_inputs`].
pub const ASSETS: &[(&str, &str)] = &[
    ("corpus.txt", include_str!("../../assets/demo/corpus.txt")),
    ("sts.jsonl", include_str!("../../assets/demo/sts.jsonl")),
    ("clustering.jsonl", include_str!("../../assets/demo/clustering.jsonl")),
    ("retrieval_queries.jsonl", include_str!("../../assets/demo/retrieval_queries.jsonl")),
    ("retrieval_corpus.jsonl", include_str!("../../assets/demo/retrieval_corpus.jsonl")),
    ("retrieval_qrels.jsonl", include_str!("../../assets/demo/retrieval_qrels.jsonl")),
    (CONFIG_FILE, include_str!("../../assets/demo/demo.toml")),
    (TRANSCRIPT_FILE, include_str!("../../assets/demo/transcript.jsonl")),
];

/// The synthetic data files of the preset, regenerated from their seeds.
pub fn generated_assets() -> Vec<(&'static str, String)> {
    let corpus: String = synthetic::documents(200, 0)
        .into_iter()
        .map(|d| d.text + "\n")
        .collect();
    let retrieval = synthetic::retrieval_task(40, 100, 13);
    let qrels: Vec<serde_json::Value> = retrieval
        .qrels
        .iter()
        .map(|(q, d, rel)| serde_json::json!({"query_id": q, "doc_id": d, "rel": rel}))
        .collect();
    vec![
        ("corpus.txt", corpus),
        ("sts.jsonl", jsonl(&synthetic::sts_pairs(150, 9))),
        ("clustering.jsonl", jsonl(&synthetic::clustering_items(120, 11))),
        ("retrieval_queries.jsonl", jsonl(&retrieval.queries)),
        ("retrieval_corpus.jsonl", jsonl(&retrieval.corpus)),
        ("retrieval_qrels.jsonl", jsonl(&qrels)),
    ]
}

/// Write the bundled inputs into `dir`; returns the config path.
pub fn write_inputs(dir: &Path) -> Result<PathBuf, PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, body) in ASSETS {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))?;
    }
    Ok(dir.join(CONFIG_FILE))
}

/// Run every stage of the preset in `workspace`. With `record_to`, the
/// synthetic-world oracle answers instead of the bundled transcript and
/// the exchanges are written to that path.
pub fn run_demo(workspace: &Path, record_to: Option<&Path>) -> Result<Vec<StageSummary>, PipelineError> {
    let ws = Workspace::open(workspace)?;
    let inputs = ws.path("inputs");
    write_inputs(&inputs)?;
    run_inputs(ws, &inputs, record_to)
}

/// As [`run_demo`], with the preset's files copied from `source` instead of
/// the bundled ones.
pub fn run_demo_from(source: &Path, workspace: &Path, record_to: Option<&Path>) -> Result<Vec<StageSummary>, PipelineError> {
    let ws = Workspace::open(workspace)?;
    let inputs = ws.path("inputs");
    fs::create_dir_all(&inputs).map_err(io_err(&inputs))?;
    for (name, _) in ASSETS {
        let (from, to) = (source.join(name), inputs.join(name));
        fs::copy(&from, &to).map_err(io_err(&from))?;
    }
    run_inputs(ws, &inputs, record_to)
}

fn run_inputs(ws: Workspace, inputs: &Path, record_to: Option<&Path>) -> Result<Vec<StageSummary>, PipelineError> {
    let mut cfg = PipelineConfig::load(&inputs.join(CONFIG_FILE))?;
    if record_to.is_some() {
        cfg.llm.kind = LlmKind::TopicOracle;
        cfg.llm.transcript = None;
    }
    let mut p = Pipeline::new(cfg, inputs, ws)?;
    if record_to.is_some() {
        p = p.recording();
    }
    let out = p.run_all()?;
    if let Some(path) = record_to {
        let t = p.transcript_jsonl().unwrap_or_default();
        fs::write(path, t).map_err(io_err(path))?;
    }
    Ok(out)
}
