use std::collections::HashMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use super::heads::{head_len, sigmoid, MbqaHeads};
use super::{MbqaError, TrainingExample};
use crate::corpus::Corpus;
use crate::cqg::QuestionBank;
use crate::hashing::derive_seed;
use crate::providers::{embed_all, Embedding, EncoderProvider};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub steps: u64,
    /// Positive-class weight; computed from the examples when absent.
    #[serde(default)]
    pub pos_weight: Option<f64>,
    pub hidden: usize,
    pub seed: u64,
    pub tau: f64,
    /// Log the running loss every this many steps (0 disables).
    #[serde(default)]
    pub log_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            steps: 3_000_000,
            pos_weight: None,
            hidden: 128,
            seed: 0,
            tau: 0.5,
            log_every: 100_000,
        }
    }
}

impl TrainingConfig {
    fn validate(&self) -> Result<(), MbqaError> {
        let bad = |m: &str| Err(MbqaError::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie in (0, 1)");
        }
        if self.hidden == 0 {
            return bad("hidden must be positive");
        }
        if let Some(w) = self.pos_weight {
            if !(w > 0.0 && w.is_finite()) {
                return bad("pos_weight must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub heads: MbqaHeads,
    pub pos_weight: f64,
    /// Mean per-step loss over each logging window, keyed by the last step.
    pub loss_curve: Vec<(u64, f64)>,
    /// Adam steps taken by each head.
    pub head_steps: Vec<u64>,
}

/// `#no / #yes` over every answered pair.
pub fn compute_pos_weight(examples: &[TrainingExample]) -> Result<f64, MbqaError> {
    let (mut yes, mut no) = (0usize, 0usize);
    for a in examples.iter().flat_map(|e| e.answers.values()) {
        if *a {
            yes += 1;
        } else {
            no += 1;
        }
    }
    if yes == 0 || no == 0 {
        return Err(MbqaError::OneClass { yes, no });
    }
    Ok(no as f64 / yes as f64)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy on a logit with the positive term scaled by
/// `pos_weight`.
pub fn weighted_bce(z: f64, label: bool, pos_weight: f64) -> f64 {
    if label {
        pos_weight * softplus(-z)
    } else {
        softplus(z)
    }
}

/// Derivative of [`weighted_bce`] with respect to the logit.
pub fn weighted_bce_dz(z: f64, label: bool, pos_weight: f64) -> f64 {
    if label {
        pos_weight * (sigmoid(z) - 1.0)
    } else {
        sigmoid(z)
    }
}

/// Loss of one head on one labelled embedding, with the gradient of that
/// loss written into `grad` (same layout as the head's parameters).
pub fn head_loss_grad(
    p: &[f64],
    d: usize,
    h: usize,
    e: &[f64],
    label: bool,
    pos_weight: f64,
    grad: &mut [f64],
) -> f64 {
    let (w1, rest) = p.split_at(h * d);
    let (b1, rest) = rest.split_at(h);
    let (w2, b2) = rest.split_at(h);
    let mut pre = vec![0.0; h];
    let mut z = b2[0];
    for j in 0..h {
        pre[j] = b1[j] + w1[j * d..(j + 1) * d].iter().zip(e).map(|(w, x)| w * x).sum::<f64>();
        if pre[j] > 0.0 {
            z += w2[j] * pre[j];
        }
    }
    let loss = weighted_bce(z, label, pos_weight);
    let dz = weighted_bce_dz(z, label, pos_weight);
    let (gw1, rest) = grad.split_at_mut(h * d);
    let (gb1, rest) = rest.split_at_mut(h);
    let (gw2, gb2) = rest.split_at_mut(h);
    gb2[0] = dz;
    for j in 0..h {
        let active = pre[j] > 0.0;
        gw2[j] = if active { dz * pre[j] } else { 0.0 };
        let dpre = if active { dz * w2[j] } else { 0.0 };
        gb1[j] = dpre;
        for (g, x) in gw1[j * d..(j + 1) * d].iter_mut().zip(e) {
            *g = dpre * x;
        }
    }
    loss
}

/// Adam state of one head.
struct AdamSlot<'a> {
    m1: &'a mut [f64],
    m2: &'a mut [f64],
    steps: &'a mut u64,
}

impl AdamSlot<'_> {
    fn update(&mut self, lr: f64, params: &mut [f64], grad: &[f64], scale: f64) {
        *self.steps += 1;
        let t = *self.steps as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for k in 0..params.len() {
            let g = grad[k] * scale;
            self.m1[k] = BETA1 * self.m1[k] + (1.0 - BETA1) * g;
            self.m2[k] = BETA2 * self.m2[k] + (1.0 - BETA2) * g * g;
            params[k] -= lr * (self.m1[k] / c1) / ((self.m2[k] / c2).sqrt() + EPSILON);
        }
    }
}

/// Mutable blocks `keys[i] * n .. (keys[i] + 1) * n` of `data`; `keys`
/// must be strictly ascending.
fn blocks_mut<'a, T>(mut data: &'a mut [T], n: usize, keys: &[usize]) -> Vec<&'a mut [T]> {
    let mut out = Vec::with_capacity(keys.len());
    let mut offset = 0;
    for &k in keys {
        let (_, tail) = std::mem::take(&mut data).split_at_mut((k - offset) * n);
        let (block, rest) = tail.split_at_mut(n);
        out.push(block);
        data = rest;
        offset = k + 1;
    }
    out
}

fn init_heads(m: usize, d: usize, h: usize, seed: u64) -> Vec<f64> {
    let n = head_len(d, h);
    let mut params = vec![0.0; m * n];
    let (bound_in, bound_hidden) = (1.0 / (d as f64).sqrt(), 1.0 / (h as f64).sqrt());
    for (i, head) in params.chunks_mut(n).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("init/{i}")));
        for (k, p) in head.iter_mut().enumerate() {
            let bound = if k < h * d + h { bound_in } else { bound_hidden };
            *p = rng.gen_range(-bound..=bound);
        }
    }
    params
}

/// Train heads on precomputed embeddings, `embeddings[i]` belonging to
/// `examples[i]`. Each step takes one document from a per-epoch seeded
/// permutation; its loss is the mean weighted BCE over its answered
/// questions, and only those heads are updated.
pub fn train_on_embeddings(
    examples: &[TrainingExample],
    embeddings: &[Embedding],
    m: usize,
    bank_fingerprint: &str,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome, MbqaError> {
    cfg.validate()?;
    let usable: Vec<usize> = (0..examples.len())
        .filter(|&i| !examples[i].answers.is_empty())
        .collect();
    if usable.is_empty() || embeddings.len() != examples.len() {
        return Err(MbqaError::NoExamples);
    }
    for ex in examples {
        if let Some((&q, _)) = ex.answers.range(m..).next() {
            return Err(MbqaError::UnknownQuestion { question: q, m });
        }
    }
    let d = embeddings[usable[0]].dim();
    if let Some(e) = embeddings.iter().find(|e| e.dim() != d) {
        return Err(MbqaError::Dimension {
            expected: d,
            got: e.dim(),
        });
    }
    let pos_weight = match cfg.pos_weight {
        Some(w) => w,
        None => compute_pos_weight(examples)?,
    };
    let h = cfg.hidden;
    let n = head_len(d, h);
    let inputs: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.values().iter().map(|&x| x as f64).collect())
        .collect();
    let mut params = init_heads(m, d, h, cfg.seed);
    let mut m1 = vec![0.0; m * n];
    let mut m2 = vec![0.0; m * n];
    let mut head_steps = vec![0u64; m];
    let mut order = usable.clone();
    let mut loss_curve = Vec::new();
    let mut window = (0.0, 0u64);

    for step in 0..cfg.steps {
        let pos = (step % usable.len() as u64) as usize;
        if pos == 0 {
            let epoch = step / usable.len() as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("epoch/{epoch}")));
            order.copy_from_slice(&usable);
            order.shuffle(&mut rng);
        }
        let doc = order[pos];
        let input = &inputs[doc];
        let answers = &examples[doc].answers;
        let keys: Vec<usize> = answers.keys().copied().collect();
        let scale = 1.0 / keys.len() as f64;
        let slots = blocks_mut(&mut params, n, &keys)
            .into_iter()
            .zip(blocks_mut(&mut m1, n, &keys))
            .zip(blocks_mut(&mut m2, n, &keys))
            .zip(blocks_mut(&mut head_steps, 1, &keys))
            .zip(answers.values())
            .collect::<Vec<_>>();
        // heads are independent, so each one is updated on its own thread;
        // losses are summed afterwards in question order
        let losses: Vec<f64> = slots
            .into_par_iter()
            .map(|((((head, m1), m2), steps), &label)| {
                let mut grad = vec![0.0; n];
                let l = head_loss_grad(head, d, h, input, label, pos_weight, &mut grad);
                if l.is_finite() && grad.iter().all(|g| g.is_finite()) {
                    let mut slot = AdamSlot {
                        m1,
                        m2,
                        steps: &mut steps[0],
                    };
                    slot.update(cfg.learning_rate, head, &grad, scale);
                    l
                } else {
                    f64::NAN
                }
            })
            .collect();
        let mut loss = 0.0;
        for (&q, l) in keys.iter().zip(&losses) {
            if !l.is_finite() {
                return Err(MbqaError::NonFinite { step, question: q });
            }
            loss += l * scale;
        }
        window.0 += loss;
        window.1 += 1;
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            let mean = window.0 / window.1 as f64;
            info!(step = step + 1, loss = mean, "training");
            loss_curve.push((step + 1, mean));
            window = (0.0, 0);
        }
    }
    if window.1 > 0 {
        loss_curve.push((cfg.steps, window.0 / window.1 as f64));
    }

    let heads = MbqaHeads::from_params(
        m,
        d,
        h,
        cfg.seed,
        cfg.tau,
        bank_fingerprint,
        params.iter().map(|&x| x as f32).collect(),
    )?;
    Ok(TrainOutcome {
        heads,
        pos_weight,
        loss_curve,
        head_steps,
    })
}

/// Encode each example's document once with the frozen encoder, then train.
pub fn train_heads(
    examples: &[TrainingExample],
    corpus: &Corpus,
    encoder: &dyn EncoderProvider,
    bank: &QuestionBank,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome, MbqaError> {
    let texts: HashMap<&str, &str> = corpus
        .documents()
        .iter()
        .map(|d| (d.id.as_str(), d.text.as_str()))
        .collect();
    let mut batch = Vec::with_capacity(examples.len());
    for ex in examples {
        match texts.get(ex.document_id.as_str()) {
            Some(t) => batch.push(*t),
            None => return Err(MbqaError::UnknownDocument(ex.document_id.clone())),
        }
    }
    let embeddings = embed_all(encoder, &batch, 64).map_err(|source| MbqaError::Encoder {
        document_id: match &source {
            crate::providers::EncoderError::Failed { index, .. } => {
                examples[*index].document_id.clone()
            }
            _ => String::new(),
        },
        source,
    })?;
    train_on_embeddings(examples, &embeddings, bank.m(), &bank.fingerprint(), cfg)
}
