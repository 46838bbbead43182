//! Cost of answering every question for every document with an LLM versus
//! collecting training data once and running the classifier heads.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CostError {
    #[error("invalid cost parameter {field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("no inference-hours entry for {0} questions")]
    MissingInferHours(u64),
}

/// Per-1M-token prices of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceTier {
    pub name: String,
    pub price_in: f64,
    pub price_out: f64,
}

impl PriceTier {
    pub fn gpt_4o_mini() -> Self {
        Self {
            name: "GPT-4o-mini".into(),
            price_in: 0.075,
            price_out: 0.3,
        }
    }

    pub fn gpt_4o() -> Self {
        Self {
            name: "GPT-4o".into(),
            price_in: 2.5,
            price_out: 7.5,
        }
    }
}

/// Average tokens per prompt fitted to a published total: `total_tokens`
/// and `total_usd` spread over `prompts` at the given prices. Returns
/// `(input, output)`.
pub fn calibrate_tokens(total_usd: f64, total_tokens: f64, prompts: f64, price_in: f64, price_out: f64) -> (f64, f64) {
    let tokens = total_tokens / prompts;
    let usd_per_prompt = total_usd * 1e6 / prompts;
    let output = (usd_per_prompt - price_in * tokens) / (price_out - price_in);
    (tokens - output, output)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostParams {
    pub num_docs: u64,
    pub num_questions: u64,
    pub questions_per_prompt: u64,
    pub avg_input_tokens_per_prompt: f64,
    pub avg_output_tokens_per_prompt: f64,
    /// USD per 1M input tokens.
    pub price_in: f64,
    /// USD per 1M output tokens.
    pub price_out: f64,
    pub training_texts_per_question: u64,
    /// Training texts are longer than MS MARCO passages, so collection
    /// prompts carry their own input size.
    pub training_input_tokens_per_prompt: f64,
    pub training_output_tokens_per_prompt: f64,
    /// USD per GPU hour.
    pub gpu_rate: f64,
    pub train_hours: f64,
    /// Inference hours over the whole corpus, keyed by question count.
    #[serde(with = "hours_table")]
    pub infer_hours: BTreeMap<u64, f64>,
}

/// TOML tables need string keys.
mod hours_table {
    use std::collections::BTreeMap;

    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<u64, f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(map.iter().map(|(k, v)| (k.to_string(), v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u64, f64>, D::Error> {
        BTreeMap::<String, f64>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                k.trim()
                    .parse()
                    .map(|k| (k, v))
                    .map_err(|_| D::Error::custom(format!("infer_hours key {k:?} is not a question count")))
            })
            .collect()
    }
}

impl Default for CostParams {
    /// MS MARCO dev set, 10,000 questions, mini-tier prices and the
    /// calibrated token preset.
    fn default() -> Self {
        Self {
            num_docs: 8_800_000,
            num_questions: 10_000,
            questions_per_prompt: 20,
            avg_input_tokens_per_prompt: 207.5,
            avg_output_tokens_per_prompt: 133.4,
            price_in: 0.075,
            price_out: 0.3,
            training_texts_per_question: 1_000,
            training_input_tokens_per_prompt: 293.1,
            training_output_tokens_per_prompt: 133.4,
            gpu_rate: 0.08,
            train_hours: 36.0,
            infer_hours: BTreeMap::from([
                (2_000, 48.0),
                (4_000, 63.0),
                (6_000, 73.0),
                (8_000, 79.0),
                (10_000, 90.0),
            ]),
        }
    }
}

impl CostParams {
    pub fn with_questions(&self, num_questions: u64) -> Self {
        Self {
            num_questions,
            ..self.clone()
        }
    }

    pub fn with_prices(&self, tier: &PriceTier) -> Self {
        Self {
            price_in: tier.price_in,
            price_out: tier.price_out,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        if self.questions_per_prompt == 0 {
            return Err(CostError::Invalid {
                field: "questions_per_prompt",
                message: "must be at least 1".into(),
            });
        }
        let reals = [
            ("avg_input_tokens_per_prompt", self.avg_input_tokens_per_prompt),
            ("avg_output_tokens_per_prompt", self.avg_output_tokens_per_prompt),
            ("price_in", self.price_in),
            ("price_out", self.price_out),
            ("training_input_tokens_per_prompt", self.training_input_tokens_per_prompt),
            ("training_output_tokens_per_prompt", self.training_output_tokens_per_prompt),
            ("gpu_rate", self.gpu_rate),
            ("train_hours", self.train_hours),
        ];
        for (field, v) in reals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CostError::Invalid {
                    field,
                    message: format!("must be a nonnegative number, got {v}"),
                });
            }
        }
        if let Some((q, h)) = self.infer_hours.iter().find(|(_, h)| !(h.is_finite() && **h >= 0.0)) {
            return Err(CostError::Invalid {
                field: "infer_hours",
                message: format!("entry for {q} questions is {h}"),
            });
        }
        Ok(())
    }

    fn per_prompt_usd(&self, input: f64, output: f64) -> f64 {
        (input * self.price_in + output * self.price_out) / 1e6
    }
}

fn prompts_per_text(p: &CostParams) -> u64 {
    p.num_questions.div_ceil(p.questions_per_prompt.max(1))
}

/// Prompts needed to answer every question for every document.
pub fn llm_prompt_count(p: &CostParams) -> u64 {
    p.num_docs * prompts_per_text(p)
}

pub fn llm_qa_cost(p: &CostParams) -> f64 {
    llm_prompt_count(p) as f64 * p.per_prompt_usd(p.avg_input_tokens_per_prompt, p.avg_output_tokens_per_prompt)
}

/// Text-question pairs collected for training.
pub fn training_pair_count(p: &CostParams) -> u64 {
    p.num_questions * p.training_texts_per_question
}

/// Prompts needed to collect the training pairs.
pub fn training_prompt_count(p: &CostParams) -> u64 {
    p.training_texts_per_question * prompts_per_text(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MbqaCost {
    pub api_usd: f64,
    pub gpu_usd: f64,
    pub total: f64,
}

pub fn mbqa_cost(p: &CostParams) -> Result<MbqaCost, CostError> {
    let infer = if p.num_questions == 0 {
        0.0
    } else {
        *p.infer_hours
            .get(&p.num_questions)
            .ok_or(CostError::MissingInferHours(p.num_questions))?
    };
    let api_usd = training_prompt_count(p) as f64
        * p.per_prompt_usd(p.training_input_tokens_per_prompt, p.training_output_tokens_per_prompt);
    let gpu_usd = (p.train_hours + infer) * p.gpu_rate;
    Ok(MbqaCost {
        api_usd,
        gpu_usd,
        total: api_usd + gpu_usd,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub model: String,
    pub num_questions: u64,
    pub usd: f64,
}

/// Models by question counts. LLM rows come first in the given tier order,
/// followed by one MBQA row per question count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub question_counts: Vec<u64>,
    pub rows: Vec<CostRow>,
}

pub fn comparison_table(base: &CostParams, question_counts: &[u64], tiers: &[PriceTier]) -> Result<CostTable, CostError> {
    base.validate()?;
    let mut rows = Vec::new();
    for tier in tiers {
        let p = base.with_prices(tier);
        for &q in question_counts {
            rows.push(CostRow {
                model: tier.name.clone(),
                num_questions: q,
                usd: llm_qa_cost(&p.with_questions(q)),
            });
        }
    }
    for &q in question_counts {
        rows.push(CostRow {
            model: "MBQA".into(),
            num_questions: q,
            usd: mbqa_cost(&base.with_questions(q))?.total,
        });
    }
    Ok(CostTable {
        question_counts: question_counts.to_vec(),
        rows,
    })
}

/// `$1,234` with the cents rounded away.
fn dollars(v: f64) -> String {
    format!("${}", crate::mbqa::thousands(v.round() as u64))
}

impl CostTable {
    fn models(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.model.as_str()) {
                out.push(&r.model);
            }
        }
        out
    }

    fn cell(&self, model: &str, q: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.num_questions == q)
            .map(|r| r.usd)
    }

    /// One json object per row.
    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("cost rows serialize") + "\n")
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Model |");
        for q in &self.question_counts {
            s.push_str(&format!(" {} |", crate::mbqa::thousands(*q)));
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(self.question_counts.len()));
        s.push('\n');
        for model in self.models() {
            s.push_str(&format!("| {model} |"));
            for &q in &self.question_counts {
                s.push_str(&format!(" {} |", self.cell(model, q).map(dollars).unwrap_or_default()));
            }
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for CostTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<14}", "Model")?;
        for q in &self.question_counts {
            write!(f, "{:>14}", crate::mbqa::thousands(*q))?;
        }
        writeln!(f)?;
        for model in self.models() {
            write!(f, "{model:<14}")?;
            for &q in &self.question_counts {
                write!(f, "{:>14}", self.cell(model, q).map(dollars).unwrap_or_default())?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
