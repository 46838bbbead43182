use std::fmt;

use serde::{Deserialize, Serialize};

use super::interpret::mean_cognitive_load;
use super::tasks::{sts_evaluate, StsTask};
use super::EvalError;
use crate::binary::BinaryMatrix;
use crate::mbqa::binarize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sweep {
    M,
    Tau,
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sweep::M => "m",
            Sweep::Tau => "tau",
        })
    }
}

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: Sweep,
    pub value: f64,
    pub spearman: f64,
    pub mean_cognitive_load: f64,
}

fn point(setting: Sweep, value: f64, task: &StsTask, a: &BinaryMatrix, b: &BinaryMatrix) -> Result<AblationRow, EvalError> {
    Ok(AblationRow {
        setting,
        value,
        spearman: sts_evaluate(task, a, b)?.spearman,
        mean_cognitive_load: mean_cognitive_load(a, b)?.mean,
    })
}

fn rethreshold(probs: &[Vec<f64>], m: usize, tau: f64, fp: &str) -> Result<BinaryMatrix, EvalError> {
    let mut out = BinaryMatrix::new(m, fp);
    for (i, p) in probs.iter().enumerate() {
        out.push_row(i.to_string(), &binarize(p, tau))?;
    }
    Ok(out)
}

/// Re-threshold stored probabilities at each `tau` and score the STS task.
pub fn ablate_tau(
    task: &StsTask,
    probs_a: &[Vec<f64>],
    probs_b: &[Vec<f64>],
    m: usize,
    bank_fingerprint: &str,
    taus: &[f64],
) -> Result<Vec<AblationRow>, EvalError> {
    if taus.is_empty() {
        return Err(EvalError::Empty("tau sweep"));
    }
    taus.iter()
        .map(|&tau| {
            let a = rethreshold(probs_a, m, tau, bank_fingerprint)?;
            let b = rethreshold(probs_b, m, tau, bank_fingerprint)?;
            point(Sweep::Tau, tau, task, &a, &b)
        })
        .collect()
}

/// Keep the first `m'` dimensions for each value in `ms` and score the STS
/// task.
pub fn ablate_m(
    task: &StsTask,
    a: &BinaryMatrix,
    b: &BinaryMatrix,
    ms: &[usize],
) -> Result<Vec<AblationRow>, EvalError> {
    if ms.is_empty() {
        return Err(EvalError::Empty("m sweep"));
    }
    ms.iter()
        .map(|&m| point(Sweep::M, m as f64, task, &a.truncate(m)?, &b.truncate(m)?))
        .collect()
}
