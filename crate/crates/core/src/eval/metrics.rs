use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::EvalError;

/// `u . v / (|u| |v|)`, or 0 when either vector is zero.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, EvalError> {
    if u.len() != v.len() {
        return Err(EvalError::LengthMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their ranks.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = mean;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::Constant);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(EvalError::TooShort {
            needed: 2,
            got: xs.len(),
        });
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gain {
    /// `rel`
    #[default]
    Linear,
    /// `2^rel - 1`
    Exponential,
}

impl Gain {
    fn apply(self, rel: f64) -> f64 {
        match self {
            Gain::Linear => rel,
            Gain::Exponential => rel.exp2() - 1.0,
        }
    }
}

fn dcg(rels: impl Iterator<Item = f64>, gain: Gain) -> f64 {
    rels.enumerate()
        .map(|(i, rel)| gain.apply(rel) / ((i + 2) as f64).log2())
        .sum()
}

/// nDCG over the first `k` entries of `ranking`. Returns 0 (with a
/// warning) when `qrels` has no positive grade.
pub fn ndcg_at_k<S: AsRef<str>>(
    ranking: &[S],
    qrels: &HashMap<String, f64>,
    k: usize,
    gain: Gain,
) -> f64 {
    let mut ideal: Vec<f64> = qrels.values().copied().filter(|r| *r > 0.0).collect();
    if ideal.is_empty() {
        warn!("query has no relevant documents; nDCG is 0");
        return 0.0;
    }
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(ideal.into_iter().take(k), gain);
    let got = dcg(
        ranking
            .iter()
            .take(k)
            .map(|d| qrels.get(d.as_ref()).copied().unwrap_or(0.0).max(0.0)),
        gain,
    );
    got / idcg
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VMeasure {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v: f64,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn relabel<T: Hash + Eq>(xs: &[T]) -> (Vec<usize>, usize) {
    let mut ids = HashMap::new();
    let out = xs
        .iter()
        .map(|x| {
            let n = ids.len();
            *ids.entry(x).or_insert(n)
        })
        .collect();
    (out, ids.len())
}

/// Homogeneity, completeness and their harmonic mean (natural-log
/// entropies).
pub fn v_measure<A: Hash + Eq, B: Hash + Eq>(
    labels_true: &[A],
    labels_pred: &[B],
) -> Result<VMeasure, EvalError> {
    if labels_true.len() != labels_pred.len() {
        return Err(EvalError::LengthMismatch(labels_true.len(), labels_pred.len()));
    }
    if labels_true.is_empty() {
        return Err(EvalError::Empty("label list"));
    }
    let n = labels_true.len() as f64;
    let (c, nc) = relabel(labels_true);
    let (k, nk) = relabel(labels_pred);
    let mut joint = vec![0usize; nc * nk];
    let mut cc = vec![0usize; nc];
    let mut kc = vec![0usize; nk];
    for (&a, &b) in c.iter().zip(&k) {
        joint[a * nk + b] += 1;
        cc[a] += 1;
        kc[b] += 1;
    }
    let h_c = entropy(cc.iter().copied(), n);
    let h_k = entropy(kc.iter().copied(), n);
    let h_ck: f64 = (0..nk)
        .map(|b| {
            (0..nc)
                .map(|a| joint[a * nk + b])
                .filter(|&x| x > 0)
                .map(|x| -(x as f64 / n) * (x as f64 / kc[b] as f64).ln())
                .sum::<f64>()
        })
        .sum();
    let h_kc: f64 = (0..nc)
        .map(|a| {
            (0..nk)
                .map(|b| joint[a * nk + b])
                .filter(|&x| x > 0)
                .map(|x| -(x as f64 / n) * (x as f64 / cc[a] as f64).ln())
                .sum::<f64>()
        })
        .sum();
    let homogeneity = if h_c == 0.0 { 1.0 } else { 1.0 - h_ck / h_c };
    let completeness = if h_k == 0.0 { 1.0 } else { 1.0 - h_kc / h_k };
    let v = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    Ok(VMeasure {
        homogeneity,
        completeness,
        v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-12);
        let c = cosine_similarity(&[1.0, 0.0, 1.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!((c - 2.0 / 6f64.sqrt()).abs() < 1e-12);
        assert!((c - 0.8165).abs() < 1e-4);
        assert_eq!(cosine_similarity(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 2.0]), Err(EvalError::LengthMismatch(1, 2))));
    }

    #[test]
    fn spearman_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&xs, &[10.0, 20.0, 30.0, 40.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&xs, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // 1 - 6 * sum(d^2) / (n (n^2 - 1)) with d = (0, 1, 1, 0)
        let expected = 1.0 - 6.0 * 2.0 / (4.0 * 15.0);
        assert!((spearman(&xs, &[1.0, 3.0, 2.0, 4.0]).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(spearman(&xs, &[1.0; 4]), Err(EvalError::Constant)));
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(EvalError::TooShort { .. })));
    }

    #[test]
    fn ties_share_mean_rank() {
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 3.0]), [3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn independent_permutation_is_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let mut ys = xs.clone();
        ys.shuffle(&mut rng);
        assert!(spearman(&xs, &ys).unwrap().abs() < 0.1);
    }

    fn qrels(pairs: &[(&str, f64)]) -> HashMap<String, f64> {
        pairs.iter().map(|(d, r)| (d.to_string(), *r)).collect()
    }

    #[test]
    fn ndcg_examples() {
        let q = qrels(&[("a", 1.0), ("b", 1.0)]);
        assert_eq!(ndcg_at_k(&["a", "b", "c"], &q, 10, Gain::Linear), 1.0);
        let got = ndcg_at_k(&["a", "x", "b"], &q, 10, Gain::Linear);
        let expected = (1.0 + 0.5) / (1.0 + 1.0 / 3f64.log2());
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.9197).abs() < 1e-4);
        let far: Vec<String> = (0..10).map(|i| format!("n{i}")).chain(["a".into()]).collect();
        assert_eq!(ndcg_at_k(&far, &q, 10, Gain::Linear), 0.0);
        assert_eq!(ndcg_at_k(&["a"], &qrels(&[]), 10, Gain::Linear), 0.0);
    }

    #[test]
    fn exponential_gain_weights_grades() {
        let q = qrels(&[("a", 2.0), ("b", 1.0)]);
        let lin = ndcg_at_k(&["b", "a"], &q, 10, Gain::Linear);
        let exp = ndcg_at_k(&["b", "a"], &q, 10, Gain::Exponential);
        let l_expected = (1.0 + 2.0 / 3f64.log2()) / (2.0 + 1.0 / 3f64.log2());
        let e_expected = (1.0 + 3.0 / 3f64.log2()) / (3.0 + 1.0 / 3f64.log2());
        assert!((lin - l_expected).abs() < 1e-12);
        assert!((exp - e_expected).abs() < 1e-12);
    }

    #[test]
    fn v_measure_examples() {
        assert_eq!(v_measure(&[0, 0, 1, 1, 2], &["b", "b", "a", "a", "c"]).unwrap().v, 1.0);
        assert_eq!(v_measure(&[0, 0, 1, 1], &[7, 7, 7, 7]).unwrap().v, 0.0);
        assert_eq!(v_measure(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().v, 0.0);
        assert!(v_measure::<i32, i32>(&[], &[]).is_err());
        assert!(v_measure(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn v_measure_matches_hand_entropies() {
        // true [0,0,0,1,1,1], pred [0,0,1,1,2,2]
        let v = v_measure(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 2, 2]).unwrap();
        let ln = |x: f64| x.ln();
        let h_c = ln(2.0);
        let h_ck = -(2.0 / 6.0) * 0.5f64.ln() * 1.0; // the mixed cluster: 2 * (1/6) ln(1/2)
        let h_k = ln(3.0);
        let h_kc = -2.0 * ((2.0 / 6.0) * ln(2.0 / 3.0) + (1.0 / 6.0) * ln(1.0 / 3.0));
        let hom = 1.0 - h_ck / h_c;
        let com = 1.0 - h_kc / h_k;
        assert!((v.homogeneity - hom).abs() < 1e-12);
        assert!((v.completeness - com).abs() < 1e-12);
        assert!((v.v - 2.0 * hom * com / (hom + com)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn spearman_ignores_monotone_maps(xs in prop::collection::vec(-100.0f64..100.0, 3..40), ys in prop::collection::vec(-100.0f64..100.0, 40), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let ys = &ys[..xs.len()];
            if let Ok(base) = spearman(&xs, ys) {
                let fx: Vec<f64> = xs.iter().map(|x| a * x + b + x.atan()).collect();
                let gy: Vec<f64> = ys.iter().map(|y| y.powi(3) + b).collect();
                let mapped = spearman(&fx, &gy).unwrap();
                prop_assert!((base - mapped).abs() < 1e-9, "{} vs {}", base, mapped);
            }
        }

        #[test]
        fn v_measure_is_label_invariant(labels in prop::collection::vec((0u8..4, 0u8..4), 1..60), shift in 1u8..10) {
            let t: Vec<u8> = labels.iter().map(|p| p.0).collect();
            let p: Vec<u8> = labels.iter().map(|p| p.1).collect();
            let base = v_measure(&t, &p).unwrap();
            let t2: Vec<u8> = t.iter().map(|x| (x + shift) * 3).collect();
            let p2: Vec<u8> = p.iter().map(|x| x.wrapping_mul(7) ^ shift).collect();
            let moved = v_measure(&t2, &p2).unwrap();
            prop_assert!((base.v - moved.v).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&base.v));
            prop_assert!((v_measure(&t, &t).unwrap().v - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ndcg_is_one_for_ideal_prefix(grades in prop::collection::vec(0u8..4, 1..30)) {
            let q: HashMap<String, f64> = grades.iter().enumerate().map(|(i, g)| (format!("d{i}"), *g as f64)).collect();
            let mut ranking: Vec<(String, u8)> = grades.iter().enumerate().map(|(i, g)| (format!("d{i}"), *g)).collect();
            ranking.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let ids: Vec<String> = ranking.into_iter().map(|r| r.0).collect();
            if grades.iter().any(|g| *g > 0) {
                prop_assert!((ndcg_at_k(&ids, &q, 10, Gain::Linear) - 1.0).abs() < 1e-12);
            }
        }
    }
}
