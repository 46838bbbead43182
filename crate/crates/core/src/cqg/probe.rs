use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::generate::{text_lookup, texts};
use super::sample::{draw, neighbourhood};
use super::{CandidateQuestion, CqgError};
use crate::cluster::ClusterModel;
use crate::corpus::Corpus;
use crate::hashing::derive_seed;
use crate::prompts::{parse_answers, render_qa_prompt};
use crate::providers::{complete_all, DecodeParams, LlmProvider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub p_positive: usize,
    pub p_hard: usize,
    pub p_easy: usize,
    /// Hard probes come from this many nearest clusters.
    pub neighbors: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            p_positive: 5,
            p_hard: 3,
            p_easy: 2,
            neighbors: 3,
        }
    }
}

/// Probe tallies and the resulting quality score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub pos_yes: usize,
    pub pos_total: usize,
    pub neg_yes: usize,
    pub neg_total: usize,
    pub quality: f64,
    /// Probe answers that could not be parsed and were counted as "no".
    #[serde(default)]
    pub unparsed: usize,
}

/// Share of positive probes answered yes minus share of negative probes
/// answered yes.
pub fn quality(pos_yes: usize, pos_total: usize, neg_yes: usize, neg_total: usize) -> f64 {
    pos_yes as f64 / pos_total as f64 - neg_yes as f64 / neg_total as f64
}

impl ProbeOutcome {
    pub fn from_counts(pos_yes: usize, pos_total: usize, neg_yes: usize, neg_total: usize) -> Self {
        Self {
            pos_yes,
            pos_total,
            neg_yes,
            neg_total,
            quality: quality(pos_yes, pos_total, neg_yes, neg_total),
            unparsed: 0,
        }
    }
}

/// Probe documents chosen for one candidate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbePlan {
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

/// Choose probe documents for a candidate from its origin cluster, its
/// nearest clusters and the remaining clusters.
pub fn plan_probe<R: Rng>(
    q: &CandidateQuestion,
    model: &ClusterModel,
    cfg: &ProbeConfig,
    rng: &mut R,
) -> Result<ProbePlan, CqgError> {
    let c = q.origin_cluster.ok_or(CqgError::NoOriginCluster)?;
    let own = model.members(c)?;
    let (nearest, rest) = neighbourhood(model, c, cfg.neighbors)?;
    let hard_pool = model.members_of(&nearest);
    let easy_pool = model.members_of(&rest);
    for (pool, name, want) in [
        (&own, "positive probes", cfg.p_positive),
        (&hard_pool, "hard negative probes", cfg.p_hard),
        (&easy_pool, "easy negative probes", cfg.p_easy),
    ] {
        if pool.is_empty() && want > 0 {
            return Err(CqgError::DeficientPool {
                pool: name,
                cluster: c,
                needed: want,
                available: 0,
            });
        }
    }
    let positives = draw(rng, &own, cfg.p_positive);
    let mut negatives = draw(rng, &hard_pool, cfg.p_hard);
    negatives.extend(draw(rng, &easy_pool, cfg.p_easy));
    Ok(ProbePlan {
        positives: positives.into_iter().map(str::to_owned).collect(),
        negatives: negatives.into_iter().map(str::to_owned).collect(),
    })
}

fn tally(plan: &ProbePlan, answers: &[Option<bool>]) -> ProbeOutcome {
    let (pos, neg) = answers.split_at(plan.positives.len());
    let yes = |a: &[Option<bool>]| a.iter().filter(|x| **x == Some(true)).count();
    let unparsed = answers.iter().filter(|x| x.is_none()).count();
    ProbeOutcome {
        unparsed,
        ..ProbeOutcome::from_counts(yes(pos), pos.len(), yes(neg), neg.len())
    }
}

fn probe_prompts(q: &CandidateQuestion, plan: &ProbePlan, lookup: &HashMap<&str, &str>) -> Vec<String> {
    texts(lookup, &plan.positives)
        .into_iter()
        .chain(texts(lookup, &plan.negatives))
        .map(|t| render_qa_prompt(t, &[q.text.as_str()]))
        .collect()
}

/// Probe one candidate: each probe text is asked the question on its own.
pub fn probe_question<R: Rng>(
    q: &CandidateQuestion,
    corpus: &Corpus,
    model: &ClusterModel,
    llm: &dyn LlmProvider,
    cfg: &ProbeConfig,
    params: &DecodeParams,
    rng: &mut R,
) -> Result<ProbeOutcome, CqgError> {
    let plan = plan_probe(q, model, cfg, rng)?;
    let prompts = probe_prompts(q, &plan, &text_lookup(corpus));
    let mut answers = Vec::with_capacity(prompts.len());
    for r in complete_all(llm, &prompts, params) {
        answers.push(parse_answers(&r?, 1)[0]);
    }
    Ok(tally(&plan, &answers))
}

/// Probe every candidate. A candidate whose LLM calls fail is returned as
/// `None` (unprobed) and must be excluded downstream.
pub fn probe_all(
    candidates: &[CandidateQuestion],
    corpus: &Corpus,
    model: &ClusterModel,
    llm: &dyn LlmProvider,
    cfg: &ProbeConfig,
    params: &DecodeParams,
    seed: u64,
) -> Result<Vec<Option<ProbeOutcome>>, CqgError> {
    let lookup = text_lookup(corpus);
    let mut plans = Vec::with_capacity(candidates.len());
    let mut prompts = Vec::new();
    for (i, q) in candidates.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("probe/{i}")));
        let plan = plan_probe(q, model, cfg, &mut rng)?;
        prompts.extend(probe_prompts(q, &plan, &lookup));
        plans.push(plan);
    }
    let mut responses = complete_all(llm, &prompts, params).into_iter();
    let mut out = Vec::with_capacity(candidates.len());
    for (q, plan) in candidates.iter().zip(&plans) {
        let n = plan.positives.len() + plan.negatives.len();
        let mut answers = Vec::with_capacity(n);
        let mut failure = None;
        for r in responses.by_ref().take(n) {
            match r {
                Ok(text) => answers.push(parse_answers(&text, 1)[0]),
                Err(e) => failure = Some(e),
            }
        }
        match failure {
            Some(e) => {
                warn!(question = %q.text, error = %e, "probe failed; question left unprobed");
                out.push(None);
            }
            None => {
                let outcome = tally(plan, &answers);
                if outcome.unparsed > 0 {
                    warn!(question = %q.text, unparsed = outcome.unparsed, "unparseable probe answers counted as no");
                }
                out.push(Some(outcome));
            }
        }
    }
    Ok(out)
}
