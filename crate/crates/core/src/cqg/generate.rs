use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing::warn;

use super::sample::{sample_contrastive, ContrastiveConfig, ContrastiveSample};
use super::{CandidateQuestion, CqgError};
use crate::cluster::ClusterModel;
use crate::corpus::Corpus;
use crate::hashing::derive_seed;
use crate::prompts::{parse_questions, render_cqg_prompt, QUESTIONS_PER_GENERATION};
use crate::providers::{complete_all, DecodeParams, LlmProvider};

/// Result of running contrastive generation over every cluster.
#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub candidates: Vec<CandidateQuestion>,
    pub samples: Vec<ContrastiveSample>,
    /// Clusters whose prompt failed or produced nothing parseable.
    pub failed: Vec<(usize, String)>,
}

pub(crate) fn text_lookup(corpus: &Corpus) -> HashMap<&str, &str> {
    corpus
        .documents()
        .iter()
        .map(|d| (d.id.as_str(), d.text.as_str()))
        .collect()
}

pub(crate) fn texts<'a>(lookup: &HashMap<&str, &'a str>, ids: &[String]) -> Vec<&'a str> {
    ids.iter()
        .map(|id| *lookup.get(id.as_str()).expect("sampled ids come from the corpus"))
        .collect()
}

/// Build the generation prompt for a sample. Negatives (hard and easy) are
/// shuffled together so their origin is not visible to the LLM.
pub fn sample_prompt<R: rand::Rng>(
    sample: &ContrastiveSample,
    lookup: &HashMap<&str, &str>,
    rng: &mut R,
) -> String {
    let positives = texts(lookup, &sample.positives);
    let mut negatives = texts(lookup, &sample.hard_negatives);
    negatives.extend(texts(lookup, &sample.easy_negatives));
    negatives.shuffle(rng);
    render_cqg_prompt(&positives, &negatives)
}

/// Generate candidate questions for every non-empty cluster. Each cluster
/// draws from its own seed derived from `seed`, so results do not depend on
/// scheduling.
pub fn generate_candidates(
    corpus: &Corpus,
    model: &ClusterModel,
    llm: &dyn LlmProvider,
    cfg: &ContrastiveConfig,
    params: &DecodeParams,
    seed: u64,
) -> Result<GenerationOutcome, CqgError> {
    let lookup = text_lookup(corpus);
    let mut samples = Vec::new();
    let mut prompts = Vec::new();
    for c in 0..model.k {
        if model.members(c)?.is_empty() {
            warn!(cluster = c, "skipping empty cluster");
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("generate/{c}")));
        let sample = sample_contrastive(model, c, cfg, &mut rng)?;
        prompts.push(sample_prompt(&sample, &lookup, &mut rng));
        samples.push(sample);
    }

    let responses = complete_all(llm, &prompts, params);
    let mut candidates = Vec::new();
    let mut failed = Vec::new();
    for (sample, response) in samples.iter().zip(responses) {
        let c = sample.cluster_id;
        let parsed = match response {
            Ok(r) => parse_questions(&r).map_err(|e| e.to_string()),
            Err(e) => Err(e.to_string()),
        };
        match parsed {
            Ok(p) => {
                if p.questions.len() < QUESTIONS_PER_GENERATION {
                    warn!(cluster = c, got = p.questions.len(), "fewer questions than requested");
                }
                if p.truncated > 0 {
                    warn!(cluster = c, dropped = p.truncated, "extra questions truncated");
                }
                candidates.extend(p.questions.into_iter().enumerate().map(|(ordinal, text)| {
                    CandidateQuestion {
                        text,
                        origin_cluster: Some(c),
                        ordinal,
                    }
                }));
            }
            Err(reason) => {
                warn!(cluster = c, %reason, "question generation failed");
                failed.push((c, reason));
            }
        }
    }
    Ok(GenerationOutcome {
        candidates,
        samples,
        failed,
    })
}
