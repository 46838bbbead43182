use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::metrics::{ndcg_at_k, spearman, v_measure, Gain, VMeasure};
use super::EvalError;
use crate::binary::{and_popcount, BinaryMatrix};
use crate::cluster::KMeans;
use crate::providers::Embedding;

/// Row-wise cosine similarity over an embedding set.
pub trait Rows: Sync {
    fn count(&self) -> usize;
    fn cosine(&self, i: usize, other: &Self, j: usize) -> f64;
}

impl Rows for BinaryMatrix {
    fn count(&self) -> usize {
        self.n()
    }

    /// Bits as 0/1 reals; a zero row has similarity 0.
    fn cosine(&self, i: usize, other: &Self, j: usize) -> f64 {
        let (a, b) = (self.popcount(i), other.popcount(j));
        if a == 0 || b == 0 {
            return 0.0;
        }
        let shared = and_popcount(self.packed_row(i), other.packed_row(j));
        shared as f64 / ((a as f64) * (b as f64)).sqrt()
    }
}

/// Dense embeddings, e.g. the encoder's own output.
pub struct DenseRows(pub Vec<Embedding>);

impl Rows for DenseRows {
    fn count(&self) -> usize {
        self.0.len()
    }

    fn cosine(&self, i: usize, other: &Self, j: usize) -> f64 {
        let (a, b) = (&self.0[i], &other.0[j]);
        let n = a.norm() * b.norm();
        if n == 0.0 {
            0.0
        } else {
            a.dot(b) / n
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsPair {
    pub text_a: String,
    pub text_b: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StsTask {
    pub name: String,
    pub pairs: Vec<StsPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskText {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalTask {
    pub name: String,
    pub queries: Vec<TaskText>,
    pub corpus: Vec<TaskText>,
    /// query id -> doc id -> grade
    pub qrels: HashMap<String, HashMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringItem {
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringTask {
    pub name: String,
    pub items: Vec<ClusteringItem>,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let file = fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Task {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn task_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// json-lines `{text_a, text_b, score}`.
pub fn load_sts(path: &Path) -> Result<StsTask, EvalError> {
    let pairs: Vec<StsPair> = read_jsonl(path)?;
    if let Some(i) = pairs.iter().position(|p| !p.score.is_finite()) {
        return Err(EvalError::Task {
            path: path.to_path_buf(),
            line: i + 1,
            message: "score is not finite".into(),
        });
    }
    Ok(StsTask {
        name: task_name(path),
        pairs,
    })
}

#[derive(Deserialize)]
struct Qrel {
    query_id: String,
    doc_id: String,
    rel: f64,
}

/// Three json-lines files: queries and corpus `{id, text}`, qrels
/// `{query_id, doc_id, rel}`.
pub fn load_retrieval(queries: &Path, corpus: &Path, qrels: &Path) -> Result<RetrievalTask, EvalError> {
    let queries: Vec<TaskText> = read_jsonl(queries)?;
    let corpus_rows: Vec<TaskText> = read_jsonl(corpus)?;
    let known: HashSet<&str> = corpus_rows.iter().map(|d| d.id.as_str()).collect();
    let mut map: HashMap<String, HashMap<String, f64>> = HashMap::new();
    for (i, q) in read_jsonl::<Qrel>(qrels)?.into_iter().enumerate() {
        if !known.contains(q.doc_id.as_str()) {
            return Err(EvalError::Task {
                path: qrels.to_path_buf(),
                line: i + 1,
                message: format!("document {:?} is not in the corpus", q.doc_id),
            });
        }
        if q.rel.is_nan() || q.rel < 0.0 {
            return Err(EvalError::Task {
                path: qrels.to_path_buf(),
                line: i + 1,
                message: "relevance must be >= 0".into(),
            });
        }
        map.entry(q.query_id).or_default().insert(q.doc_id, q.rel);
    }
    Ok(RetrievalTask {
        name: task_name(qrels),
        queries,
        corpus: corpus_rows,
        qrels: map,
    })
}

/// json-lines `{text, label}`.
pub fn load_clustering(path: &Path) -> Result<ClusteringTask, EvalError> {
    Ok(ClusteringTask {
        name: task_name(path),
        items: read_jsonl(path)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsScore {
    pub spearman: f64,
    pub spearman_x100: f64,
    pub pairs: usize,
}

/// Spearman between gold scores and the cosine similarity of row `i` of
/// `a` with row `i` of `b`.
pub fn sts_evaluate<R: Rows>(task: &StsTask, a: &R, b: &R) -> Result<StsScore, EvalError> {
    let n = task.pairs.len();
    if a.count() != n || b.count() != n {
        return Err(EvalError::LengthMismatch(n, a.count().min(b.count())));
    }
    let gold: Vec<f64> = task.pairs.iter().map(|p| p.score).collect();
    let sims: Vec<f64> = (0..n).map(|i| a.cosine(i, b, i)).collect();
    let rho = spearman(&gold, &sims)?;
    Ok(StsScore {
        spearman: rho,
        spearman_x100: rho * 100.0,
        pairs: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScore {
    pub ndcg: f64,
    pub k: usize,
    pub per_query: Vec<(String, f64)>,
}

/// Mean nDCG@k. Rows are aligned with `task.queries` and `task.corpus`;
/// equal scores are ordered by ascending document id.
pub fn retrieval_evaluate<R: Rows>(
    task: &RetrievalTask,
    queries: &R,
    corpus: &R,
    k: usize,
    gain: Gain,
) -> Result<RetrievalScore, EvalError> {
    if task.corpus.is_empty() {
        return Err(EvalError::Empty("retrieval corpus"));
    }
    if task.queries.is_empty() {
        return Err(EvalError::Empty("query set"));
    }
    if queries.count() != task.queries.len() {
        return Err(EvalError::LengthMismatch(task.queries.len(), queries.count()));
    }
    if corpus.count() != task.corpus.len() {
        return Err(EvalError::LengthMismatch(task.corpus.len(), corpus.count()));
    }
    let empty = HashMap::new();
    let per_query: Vec<(String, f64)> = task
        .queries
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let mut scored: Vec<(f64, &str)> = task
                .corpus
                .iter()
                .enumerate()
                .map(|(di, d)| (queries.cosine(qi, corpus, di), d.id.as_str()))
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
            let ranking: Vec<&str> = scored.iter().take(k).map(|s| s.1).collect();
            let rels = task.qrels.get(&q.id).unwrap_or(&empty);
            (q.id.clone(), ndcg_at_k(&ranking, rels, k, gain))
        })
        .collect();
    let ndcg = per_query.iter().map(|q| q.1).sum::<f64>() / per_query.len() as f64;
    Ok(RetrievalScore { ndcg, k, per_query })
}

/// k-means with one cluster per gold label over the rows (bits as reals),
/// scored by V-measure.
pub fn clustering_evaluate(
    matrix: &BinaryMatrix,
    labels: &[String],
    seed: u64,
) -> Result<VMeasure, EvalError> {
    if matrix.n() != labels.len() {
        return Err(EvalError::LengthMismatch(matrix.n(), labels.len()));
    }
    let k = labels.iter().collect::<HashSet<_>>().len();
    if k == 0 {
        return Err(EvalError::Empty("clustering task"));
    }
    let rows: Vec<Vec<f32>> = (0..matrix.n()).map(|r| matrix.row_f32(r)).collect();
    let fit = KMeans::new(k, seed).fit(&rows)?;
    v_measure(labels, &fit.labels)
}
