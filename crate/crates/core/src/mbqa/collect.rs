use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::{MbqaError, TrainingExample};
use crate::cluster::ClusterModel;
use crate::corpus::Corpus;
use crate::cqg::QuestionBank;
use crate::hashing::derive_seed;
use crate::prompts::{parse_answers, render_qa_prompt};
use crate::providers::{
    complete_all, prompt_fingerprint, AnswerCache, AnswerRecord, DecodeParams, LlmProvider,
};

/// Prompts sent per round; answers are written to the cache after each
/// round so an interrupted collection resumes where it stopped.
const ROUND: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    pub in_cluster: usize,
    pub neighbor: usize,
    /// Neighbouring documents come from this many nearest clusters.
    pub neighbor_clusters: usize,
    pub random: usize,
    /// Questions per QA prompt.
    pub group: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            in_cluster: 500,
            neighbor: 300,
            neighbor_clusters: 5,
            random: 200,
            group: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CollectOutcome {
    pub examples: Vec<TrainingExample>,
    pub prompts_sent: usize,
    /// Pairs answered from the cache without a prompt.
    pub cache_hits: usize,
    /// Answer lines that did not parse and were recorded as "no".
    pub unparsed: usize,
}

fn draw_excluding<'a>(
    rng: &mut ChaCha8Rng,
    pool: &[&'a str],
    n: usize,
    taken: &mut HashSet<&'a str>,
) -> Vec<&'a str> {
    let free: Vec<&str> = pool.iter().copied().filter(|d| !taken.contains(d)).collect();
    let picked: Vec<&str> = index::sample(rng, free.len(), n.min(free.len()))
        .into_iter()
        .map(|i| free[i])
        .collect();
    taken.extend(picked.iter().copied());
    picked
}

/// Documents whose answers train question `q`: in-cluster, neighbouring
/// and random pools, disjoint. A question without an origin cluster draws
/// all of them at random.
fn question_pool<'a>(
    origin: Option<usize>,
    model: &'a ClusterModel,
    all: &[&'a str],
    cfg: &CollectConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<&'a str>, MbqaError> {
    let mut taken = HashSet::new();
    let mut out = Vec::new();
    match origin {
        Some(c) => {
            let own = model.members(c)?;
            out.extend(draw_excluding(rng, &own, cfg.in_cluster, &mut taken));
            let near = cfg.neighbor_clusters.min(model.k.saturating_sub(1));
            let neighbours = model.members_of(&model.nearest_clusters(c, near)?);
            out.extend(draw_excluding(rng, &neighbours, cfg.neighbor, &mut taken));
            out.extend(draw_excluding(rng, all, cfg.random, &mut taken));
        }
        None => {
            let n = cfg.in_cluster + cfg.neighbor + cfg.random;
            out.extend(draw_excluding(rng, all, n, &mut taken));
        }
    }
    Ok(out)
}

/// Gather LLM answers for every bank question over its sampled documents.
/// Questions sharing a document are asked together, `group` per prompt.
/// Answers already in `cache` are reused.
#[allow(clippy::too_many_arguments)]
pub fn collect_answers(
    corpus: &Corpus,
    bank: &QuestionBank,
    model: &ClusterModel,
    llm: &dyn LlmProvider,
    cache: &AnswerCache,
    cfg: &CollectConfig,
    params: &DecodeParams,
    seed: u64,
) -> Result<CollectOutcome, MbqaError> {
    let all: Vec<&str> = model.doc_ids().iter().map(String::as_str).collect();
    let mut wanted: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for q in bank.questions() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("collect/{}", q.id)));
        for doc in question_pool(q.origin_cluster, model, &all, cfg, &mut rng)? {
            wanted.entry(doc).or_default().insert(q.id);
        }
    }

    let texts: BTreeMap<&str, &str> = corpus
        .documents()
        .iter()
        .map(|d| (d.id.as_str(), d.text.as_str()))
        .collect();
    let group = cfg.group.max(1);
    let mut jobs: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut cache_hits = 0;
    for (&doc, qs) in &wanted {
        if !texts.contains_key(doc) {
            return Err(MbqaError::UnknownDocument(doc.to_owned()));
        }
        let missing: Vec<usize> = qs
            .iter()
            .copied()
            .filter(|&q| cache.get(q, doc).is_none())
            .collect();
        cache_hits += qs.len() - missing.len();
        jobs.extend(missing.chunks(group).map(|c| (doc, c.to_vec())));
    }

    let question_text = bank.texts();
    let mut unparsed = 0;
    for (r, round) in jobs.chunks(ROUND).enumerate() {
        let prompts: Vec<String> = round
            .iter()
            .map(|(doc, qs)| {
                let asked: Vec<&str> = qs.iter().map(|&q| question_text[q]).collect();
                render_qa_prompt(texts[doc], &asked)
            })
            .collect();
        let mut records = Vec::new();
        for (((doc, qs), prompt), response) in round
            .iter()
            .zip(&prompts)
            .zip(complete_all(llm, &prompts, params))
        {
            let fingerprint = prompt_fingerprint(prompt);
            for (&q, a) in qs.iter().zip(parse_answers(&response?, qs.len())) {
                if a.is_none() {
                    unparsed += 1;
                }
                records.push(AnswerRecord {
                    question_id: q,
                    document_id: (*doc).to_owned(),
                    answer: a.unwrap_or(false),
                    prompt_fingerprint: fingerprint.clone(),
                });
            }
        }
        cache.insert_all(&records)?;
        info!(round = r + 1, of = jobs.len().div_ceil(ROUND), "answer collection");
    }
    if unparsed > 0 {
        warn!(unparsed, "unparseable answers recorded as no");
    }

    let examples = corpus
        .documents()
        .iter()
        .filter_map(|d| {
            let qs = wanted.get(d.id.as_str())?;
            let answers = qs
                .iter()
                .map(|&q| (q, cache.get(q, &d.id).expect("answer collected")))
                .collect();
            Some(TrainingExample {
                document_id: d.id.clone(),
                answers,
            })
        })
        .collect();
    Ok(CollectOutcome {
        examples,
        prompts_sent: jobs.len(),
        cache_hits,
        unparsed,
    })
}
