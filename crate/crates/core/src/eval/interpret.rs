use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::binary::{and_popcount, BinaryMatrix};
use crate::cqg::QuestionBank;

/// Number of dimensions where both vectors answer yes.
pub fn cognitive_load(u: &[bool], v: &[bool]) -> Result<u64, EvalError> {
    if u.len() != v.len() {
        return Err(EvalError::LengthMismatch(u.len(), v.len()));
    }
    Ok(u.iter().zip(v).filter(|(a, b)| **a && **b).count() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CognitiveLoad {
    pub mean: f64,
    /// Mean rounded to the nearest integer.
    pub rounded: u64,
    pub pairs: usize,
}

/// Mean load over aligned rows of two matrices.
pub fn mean_cognitive_load(a: &BinaryMatrix, b: &BinaryMatrix) -> Result<CognitiveLoad, EvalError> {
    if a.n() != b.n() {
        return Err(EvalError::LengthMismatch(a.n(), b.n()));
    }
    if a.m() != b.m() {
        return Err(EvalError::LengthMismatch(a.m(), b.m()));
    }
    if a.n() == 0 {
        return Err(EvalError::Empty("pair set"));
    }
    let total: u64 = (0..a.n())
        .map(|i| and_popcount(a.packed_row(i), b.packed_row(i)) as u64)
        .sum();
    let mean = total as f64 / a.n() as f64;
    Ok(CognitiveLoad {
        mean,
        rounded: mean.round() as u64,
        pairs: a.n(),
    })
}

/// Keep the first `m_prime` dimensions of every row.
pub fn truncate_dimensions(matrix: &BinaryMatrix, m_prime: usize) -> Result<BinaryMatrix, EvalError> {
    Ok(matrix.truncate(m_prime)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedQuestion {
    pub id: usize,
    pub text: String,
}

/// Questions behind the similarity of two texts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub text_a: String,
    pub text_b: String,
    pub shared_yes: Vec<ExplainedQuestion>,
    pub only_a: Vec<ExplainedQuestion>,
    pub only_b: Vec<ExplainedQuestion>,
    pub cognitive_load: u64,
}

impl ExplanationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "A: {}", self.text_a);
        let _ = writeln!(s, "B: {}", self.text_b);
        let _ = writeln!(s, "cognitive load: {}", self.cognitive_load);
        for (title, qs) in [
            ("yes for both", &self.shared_yes),
            ("yes for A only", &self.only_a),
            ("yes for B only", &self.only_b),
        ] {
            let _ = writeln!(s, "\n{title} ({}):", qs.len());
            for q in qs {
                let _ = writeln!(s, "  [{}] {}", q.id, q.text);
            }
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "**A:** {}\n\n**B:** {}\n", self.text_a, self.text_b);
        let _ = writeln!(s, "Cognitive load: {}\n", self.cognitive_load);
        for (title, qs) in [
            ("Yes for both", &self.shared_yes),
            ("Yes for A only", &self.only_a),
            ("Yes for B only", &self.only_b),
        ] {
            let _ = writeln!(s, "### {title}\n");
            if qs.is_empty() {
                s.push_str("_none_\n");
            }
            for q in qs {
                let _ = writeln!(s, "- `{}` {}", q.id, q.text);
            }
            s.push('\n');
        }
        s
    }
}

/// Split the bank's questions by how the two rows answer them. The rows
/// must come from the same bank (`rows_fingerprint`).
pub fn explain_pair(
    text_a: &str,
    row_a: &[bool],
    text_b: &str,
    row_b: &[bool],
    rows_fingerprint: &str,
    bank: &QuestionBank,
) -> Result<ExplanationReport, EvalError> {
    let fp = bank.fingerprint();
    if rows_fingerprint != fp {
        return Err(EvalError::BankMismatch {
            rows: rows_fingerprint.to_owned(),
            bank: fp,
        });
    }
    if row_a.len() != bank.m() {
        return Err(EvalError::LengthMismatch(bank.m(), row_a.len()));
    }
    if row_b.len() != bank.m() {
        return Err(EvalError::LengthMismatch(bank.m(), row_b.len()));
    }
    let mut report = ExplanationReport {
        text_a: text_a.to_owned(),
        text_b: text_b.to_owned(),
        shared_yes: Vec::new(),
        only_a: Vec::new(),
        only_b: Vec::new(),
        cognitive_load: 0,
    };
    for (q, (&a, &b)) in bank.questions().iter().zip(row_a.iter().zip(row_b)) {
        let item = || ExplainedQuestion {
            id: q.id,
            text: q.text.clone(),
        };
        match (a, b) {
            (true, true) => report.shared_yes.push(item()),
            (true, false) => report.only_a.push(item()),
            (false, true) => report.only_b.push(item()),
            (false, false) => {}
        }
    }
    report.cognitive_load = report.shared_yes.len() as u64;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cqg::dedup_in_order;
    use crate::providers::mock_encoder;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn matrix(rows: &[Vec<bool>]) -> BinaryMatrix {
        let mut mx = BinaryMatrix::new(rows.first().map_or(0, Vec::len), "fp");
        for (i, r) in rows.iter().enumerate() {
            mx.push_row(format!("r{i}"), r).unwrap();
        }
        mx
    }

    #[test]
    fn load_counts_shared_yes() {
        assert_eq!(cognitive_load(&[true, false, true], &[true, true, true]).unwrap(), 2);
        assert_eq!(cognitive_load(&[false; 4], &[true; 4]).unwrap(), 0);
        assert!(cognitive_load(&[true], &[true, true]).is_err());
    }

    #[test]
    fn load_matches_loop_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let m = rng.gen_range(1..200);
            let u: Vec<bool> = (0..m).map(|_| rng.gen()).collect();
            let v: Vec<bool> = (0..m).map(|_| rng.gen()).collect();
            let mut expected = 0;
            for j in 0..m {
                if u[j] && v[j] {
                    expected += 1;
                }
            }
            assert_eq!(cognitive_load(&u, &v).unwrap(), expected);
            let (a, b) = (matrix(&[u]), matrix(&[v]));
            assert_eq!(and_popcount(a.packed_row(0), b.packed_row(0)) as u64, expected);
        }
    }

    #[test]
    fn mean_of_two_and_four_is_three() {
        let a = matrix(&[vec![true, true, false, false], vec![true; 4]]);
        let b = matrix(&[vec![true, true, true, false], vec![true; 4]]);
        let l = mean_cognitive_load(&a, &b).unwrap();
        assert_eq!((l.mean, l.rounded, l.pairs), (3.0, 3, 2));
        assert!(matches!(
            mean_cognitive_load(&BinaryMatrix::new(4, "fp"), &BinaryMatrix::new(4, "fp")),
            Err(EvalError::Empty(_))
        ));
    }

    fn bank(m: usize) -> QuestionBank {
        let qs: Vec<String> = (0..m).map(|i| format!("Is question {i} true?")).collect();
        dedup_in_order(&qs, &mock_encoder(1, 16), 1.0).unwrap()
    }

    #[test]
    fn explanation_partitions_the_yes_sets() {
        let b = bank(6);
        let ra = [true, true, false, true, false, false];
        let rb = [true, false, true, true, false, false];
        let r = explain_pair("a", &ra, "b", &rb, &b.fingerprint(), &b).unwrap();
        let ids = |v: &[ExplainedQuestion]| v.iter().map(|q| q.id).collect::<Vec<_>>();
        assert_eq!(ids(&r.shared_yes), [0, 3]);
        assert_eq!(ids(&r.only_a), [1]);
        assert_eq!(ids(&r.only_b), [2]);
        assert_eq!(r.cognitive_load, cognitive_load(&ra, &rb).unwrap());
        assert_eq!(r.shared_yes[1].text, "Is question 3 true?");
        assert!(r.to_text().contains("[3] Is question 3 true?"));
        assert!(r.to_markdown().contains("### Yes for A only"));
    }

    #[test]
    fn explanation_rejects_rows_from_another_bank() {
        let b = bank(3);
        let row = [true; 3];
        assert!(matches!(
            explain_pair("a", &row, "b", &row, "other", &b),
            Err(EvalError::BankMismatch { .. })
        ));
        assert!(explain_pair("a", &row[..2], "b", &row, &b.fingerprint(), &b).is_err());
    }

    proptest! {
        #[test]
        fn set_identity(ra in prop::collection::vec(any::<bool>(), 8), rb in prop::collection::vec(any::<bool>(), 8)) {
            let b = bank(8);
            let r = explain_pair("a", &ra, "b", &rb, &b.fingerprint(), &b).unwrap();
            let set = |v: &[ExplainedQuestion]| v.iter().map(|q| q.id).collect::<HashSet<_>>();
            let yes_a: HashSet<usize> = (0..8).filter(|&j| ra[j]).collect();
            let yes_b: HashSet<usize> = (0..8).filter(|&j| rb[j]).collect();
            prop_assert_eq!(set(&r.shared_yes), &yes_a & &yes_b);
            prop_assert_eq!(set(&r.only_a), &yes_a - &yes_b);
            prop_assert_eq!(set(&r.only_b), &yes_b - &yes_a);
        }

        #[test]
        fn truncation_never_raises_load(
            rows in prop::collection::vec(prop::collection::vec(any::<bool>(), 24), 2..6),
            cut in 1usize..24,
        ) {
            let n = rows.len() / 2;
            let a = matrix(&rows[..n]);
            let b = matrix(&rows[n..2 * n]);
            let full = mean_cognitive_load(&a, &b).unwrap().mean;
            let ta = truncate_dimensions(&a, cut).unwrap();
            let tb = truncate_dimensions(&b, cut).unwrap();
            let part = mean_cognitive_load(&ta, &tb).unwrap().mean;
            prop_assert!(part <= full);
            prop_assert_eq!(ta.m(), cut);
            for (i, row) in rows.iter().take(n).enumerate() {
                prop_assert_eq!(&ta.row(i)[..], &row[..cut]);
            }
        }
    }
}
