use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::heads::{binarize, probabilities, MbqaHeads};
use super::{MbqaError, TrainingExample};
use crate::corpus::Corpus;
use crate::providers::{embed_all, EncoderProvider};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Per-class and averaged classification metrics. Undefined ratios (no
/// predictions or no support for a class) are reported as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub no: ClassStats,
    pub yes: ClassStats,
    pub macro_avg: ClassStats,
    pub weighted_avg: ClassStats,
    pub accuracy: f64,
    pub total: u64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn stats(tp: u64, fp: u64, fn_: u64) -> ClassStats {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassStats {
        precision,
        recall,
        f1,
        support: tp + fn_,
    }
}

impl ClassificationReport {
    /// Build from `(predicted, actual)` pairs.
    pub fn from_pairs<I: IntoIterator<Item = (bool, bool)>>(pairs: I) -> Self {
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for (pred, actual) in pairs {
            match (pred, actual) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let yes = stats(tp, fp, fn_);
        let no = stats(tn, fn_, fp);
        let total = tp + fp + fn_ + tn;
        let avg = |f: fn(&ClassStats) -> f64| (f(&yes) + f(&no)) / 2.0;
        let wavg = |f: fn(&ClassStats) -> f64| {
            (f(&yes) * yes.support as f64 + f(&no) * no.support as f64)
                / total.max(1) as f64
        };
        Self {
            no,
            yes,
            macro_avg: ClassStats {
                precision: avg(|s| s.precision),
                recall: avg(|s| s.recall),
                f1: avg(|s| s.f1),
                support: total,
            },
            weighted_avg: ClassStats {
                precision: wavg(|s| s.precision),
                recall: wavg(|s| s.recall),
                f1: wavg(|s| s.f1),
                support: total,
            },
            accuracy: ratio(tp + tn, total),
            total,
        }
    }

    fn rows(&self) -> [(&'static str, &ClassStats); 4] {
        [
            ("No", &self.no),
            ("Yes", &self.yes),
            ("Macro Avg", &self.macro_avg),
            ("Weighted Avg", &self.weighted_avg),
        ]
    }

    /// Markdown table with the same rows as the plain-text form.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Class | Precision | Recall | F1-score | Support |\n");
        s.push_str("|---|---|---|---|---|\n");
        for (name, c) in self.rows() {
            s.push_str(&format!(
                "| {name} | {:.2} | {:.2} | {:.2} | {} |\n",
                c.precision,
                c.recall,
                c.f1,
                thousands(c.support)
            ));
        }
        s.push_str(&format!("| Accuracy | {:.2} | | | |\n", self.accuracy));
        s
    }
}

/// `958734` -> `958,734`.
pub(crate) fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl fmt::Display for ClassificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14}{:>10}{:>10}{:>10}{:>12}",
            "Class", "Precision", "Recall", "F1-score", "Support"
        )?;
        for (name, c) in self.rows() {
            writeln!(
                f,
                "{:<14}{:>10.2}{:>10.2}{:>10.2}{:>12}",
                name,
                c.precision,
                c.recall,
                c.f1,
                thousands(c.support)
            )?;
        }
        writeln!(f, "{:<14}{:>10.2}", "Accuracy", self.accuracy)
    }
}

/// Compare thresholded head outputs with LLM answers on held-out documents.
pub fn evaluate_heldout(
    heads: &MbqaHeads,
    encoder: &dyn EncoderProvider,
    corpus: &Corpus,
    heldout: &[TrainingExample],
    tau: f64,
) -> Result<ClassificationReport, MbqaError> {
    let examples: Vec<&TrainingExample> = heldout.iter().filter(|e| !e.answers.is_empty()).collect();
    if examples.is_empty() {
        return Err(MbqaError::EmptyHeldout);
    }
    let texts: HashMap<&str, &str> = corpus
        .documents()
        .iter()
        .map(|d| (d.id.as_str(), d.text.as_str()))
        .collect();
    let mut batch = Vec::with_capacity(examples.len());
    for ex in &examples {
        batch.push(
            *texts
                .get(ex.document_id.as_str())
                .ok_or_else(|| MbqaError::UnknownDocument(ex.document_id.clone()))?,
        );
    }
    let embeddings = embed_all(encoder, &batch, 64).map_err(|source| MbqaError::Encoder {
        document_id: String::new(),
        source,
    })?;
    let probs = probabilities(heads, &embeddings)?;
    let mut pairs = Vec::new();
    for (ex, p) in examples.iter().zip(&probs) {
        let bits = binarize(p, tau);
        for (&q, &actual) in &ex.answers {
            let pred = *bits.get(q).ok_or(MbqaError::UnknownQuestion {
                question: q,
                m: heads.m,
            })?;
            pairs.push((pred, actual));
        }
    }
    Ok(ClassificationReport::from_pairs(pairs))
}
