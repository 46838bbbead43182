use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::CqgError;
use crate::cluster::ClusterModel;

/// Sample sizes for one generation prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub n_positive: usize,
    pub n_hard: usize,
    pub n_easy: usize,
    /// Hard negatives come from this many nearest clusters.
    pub hard_from: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            n_positive: 6,
            n_hard: 18,
            n_easy: 18,
            hard_from: 3,
        }
    }
}

/// Document ids chosen for one contrastive generation prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveSample {
    pub cluster_id: usize,
    pub positives: Vec<String>,
    pub hard_negatives: Vec<String>,
    pub easy_negatives: Vec<String>,
}

/// Up to `n` items drawn without replacement, in draw order.
pub(crate) fn draw<'a, R: Rng>(rng: &mut R, pool: &[&'a str], n: usize) -> Vec<&'a str> {
    let n = n.min(pool.len());
    index::sample(rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Split clusters other than `c` into the `near` nearest and the rest.
pub(crate) fn neighbourhood(
    model: &ClusterModel,
    c: usize,
    near: usize,
) -> Result<(Vec<usize>, Vec<usize>), CqgError> {
    let near = near.min(model.k.saturating_sub(1));
    let nearest = model.nearest_clusters(c, near)?;
    let rest = (0..model.k)
        .filter(|&o| o != c && !nearest.contains(&o))
        .collect();
    Ok((nearest, rest))
}

/// Draw positives from cluster `c`, hard negatives from its nearest
/// clusters and easy negatives from every other cluster.
pub fn sample_contrastive<R: Rng>(
    model: &ClusterModel,
    c: usize,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<ContrastiveSample, CqgError> {
    let members = model.members(c)?;
    if members.is_empty() {
        return Err(CqgError::EmptyCluster(c));
    }
    if members.len() < cfg.n_positive {
        warn!(
            cluster = c,
            members = members.len(),
            wanted = cfg.n_positive,
            "cluster smaller than the positive sample size; using all members"
        );
    }
    let (nearest, rest) = neighbourhood(model, c, cfg.hard_from)?;
    let hard_pool = model.members_of(&nearest);
    let easy_pool = model.members_of(&rest);
    if hard_pool.len() < cfg.n_hard {
        return Err(CqgError::DeficientPool {
            pool: "hard negatives",
            cluster: c,
            needed: cfg.n_hard,
            available: hard_pool.len(),
        });
    }
    if easy_pool.len() < cfg.n_easy {
        return Err(CqgError::DeficientPool {
            pool: "easy negatives",
            cluster: c,
            needed: cfg.n_easy,
            available: easy_pool.len(),
        });
    }
    let own = |v: Vec<&str>| v.into_iter().map(str::to_owned).collect::<Vec<_>>();
    Ok(ContrastiveSample {
        cluster_id: c,
        positives: own(draw(rng, &members, cfg.n_positive)),
        hard_negatives: own(draw(rng, &hard_pool, cfg.n_hard)),
        easy_negatives: own(draw(rng, &easy_pool, cfg.n_easy)),
    })
}
