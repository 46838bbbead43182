use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::sample::draw;
use super::select::{dedup_in_order, QuestionBank};
use super::CqgError;
use crate::corpus::Corpus;
use crate::hashing::derive_seed;
use crate::prompts::{parse_questions, render_qaemb_prompt, ParseError};
use crate::providers::{complete_all, DecodeParams, EncoderProvider, LlmProvider};

/// General-purpose example questions for the baseline prompt.
pub const DEFAULT_EXAMPLE_QUESTIONS: &[&str] = &[
    "Does the text mention a specific person?",
    "Does the text describe an event in the past?",
    "Is the text about science or technology?",
    "Does the text express a negative opinion?",
    "Does the text mention a location?",
    "Does the text involve numbers or quantities?",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QaembConfig {
    /// Number of generation prompts.
    pub prompts: usize,
    pub refs_per_prompt: usize,
    pub theta: f64,
}

impl Default for QaembConfig {
    fn default() -> Self {
        Self {
            prompts: 100,
            refs_per_prompt: 5,
            theta: 0.925,
        }
    }
}

/// Baseline generation: prompts built from random reference documents and
/// fixed example questions, parsed, then deduplicated in generation order.
/// There is no probing, so bank questions carry no quality score.
pub fn qaemb_generate<S: AsRef<str>>(
    corpus: &Corpus,
    example_questions: &[S],
    llm: &dyn LlmProvider,
    encoder: &dyn EncoderProvider,
    cfg: &QaembConfig,
    params: &DecodeParams,
    seed: u64,
) -> Result<QuestionBank, CqgError> {
    if example_questions.is_empty() {
        return Err(CqgError::NoExamples);
    }
    let examples: Vec<&str> = example_questions.iter().map(AsRef::as_ref).collect();
    let texts: Vec<&str> = corpus.documents().iter().map(|d| d.text.as_str()).collect();
    let prompts: Vec<String> = (0..cfg.prompts)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("qaemb/{i}")));
            let refs = draw(&mut rng, &texts, cfg.refs_per_prompt);
            render_qaemb_prompt(&refs, &examples)
        })
        .collect();

    let mut questions = Vec::new();
    let mut first_failure: Option<ParseError> = None;
    for (i, response) in complete_all(llm, &prompts, params).into_iter().enumerate() {
        match parse_questions(&response?) {
            Ok(p) => questions.extend(p.questions),
            Err(e) => {
                warn!(prompt = i, "unparseable baseline generation dropped");
                first_failure.get_or_insert(e);
            }
        }
    }
    if questions.is_empty() {
        if let Some(e) = first_failure {
            return Err(e.into());
        }
    }
    dedup_in_order(&questions, encoder, cfg.theta)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::providers::{mock_encoder, Embedding, EncoderError, ScriptedLlm};
    use rand::Rng;

    struct ConstLlm(String);

    impl LlmProvider for ConstLlm {
        fn complete(&self, _: &str, _: &DecodeParams) -> Result<String, crate::providers::LlmError> {
            Ok(self.0.clone())
        }
    }

    struct TableEncoder(HashMap<String, Vec<f32>>);

    impl EncoderProvider for TableEncoder {
        fn dimension(&self) -> usize {
            self.0.values().next().map_or(0, Vec::len)
        }
        fn fingerprint(&self) -> String {
            "table".into()
        }
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EncoderError> {
            Ok(texts.iter().map(|t| Embedding(self.0[*t].clone())).collect())
        }
    }

    fn corpus() -> Corpus {
        Corpus::from_texts((0..20).map(|i| format!("reference article number {i}"))).unwrap()
    }

    fn numbered(qs: &[String]) -> String {
        let mut s = String::from("Here are the questions:\n");
        for (i, q) in qs.iter().enumerate() {
            s.push_str(&format!("{}. {q}\n", i + 1));
        }
        s
    }

    #[test]
    fn fixed_ten_questions_give_bank_of_ten() {
        let qs: Vec<String> = [
            "Is it about sport?",
            "Does it mention money?",
            "Is a child involved?",
            "Is it set at night?",
            "Does it describe weather?",
            "Is food mentioned?",
            "Is there a vehicle?",
            "Is music discussed?",
            "Does it quote someone?",
            "Is a disease named?",
        ]
        .map(String::from)
        .to_vec();
        let llm = ConstLlm(numbered(&qs));
        let cfg = QaembConfig {
            prompts: 1,
            ..QaembConfig::default()
        };
        let bank = qaemb_generate(
            &corpus(),
            DEFAULT_EXAMPLE_QUESTIONS,
            &llm,
            &mock_encoder(5, 256),
            &cfg,
            &DecodeParams::generation(),
            9,
        )
        .unwrap();
        assert_eq!(bank.m(), 10);
        assert!(bank.questions().iter().all(|q| q.quality.is_none()));
        assert_eq!(bank.theta, 0.925);
    }

    #[test]
    fn near_duplicate_pair_keeps_one() {
        let mut table = HashMap::new();
        table.insert("Is it about sport?".to_string(), vec![1.0, 0.0]);
        let s = (1.0f32 - 0.95 * 0.95).sqrt();
        table.insert("Is it about sports?".to_string(), vec![0.95, s]);
        let llm = ConstLlm("1. Is it about sport?\n2. Is it about sports?".into());
        let cfg = QaembConfig {
            prompts: 1,
            ..QaembConfig::default()
        };
        let bank = qaemb_generate(
            &corpus(),
            DEFAULT_EXAMPLE_QUESTIONS,
            &llm,
            &TableEncoder(table),
            &cfg,
            &DecodeParams::generation(),
            1,
        )
        .unwrap();
        assert_eq!(bank.texts(), vec!["Is it about sport?"]);
    }

    fn brute_force_survivors(vectors: &[Vec<f32>], theta: f64) -> usize {
        let unit: Vec<Vec<f64>> = vectors
            .iter()
            .map(|v| {
                let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                v.iter().map(|x| *x as f64 / n).collect()
            })
            .collect();
        let mut kept: Vec<usize> = Vec::new();
        for i in 0..unit.len() {
            let dup = kept
                .iter()
                .any(|&j| unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>() > theta);
            if !dup {
                kept.push(i);
            }
        }
        kept.len()
    }

    #[test]
    fn fifty_questions_with_twelve_duplicates_leave_thirty_eight() {
        // 38 mutually orthogonal questions plus 12 near copies of earlier ones
        let dim = 38;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut texts = Vec::new();
        let mut table = HashMap::new();
        for i in 0..38 {
            let mut v = vec![0.0f32; dim];
            v[i] = 1.0;
            let t = format!("Distinct question {i}?");
            table.insert(t.clone(), v);
            texts.push(t);
        }
        for d in 0..12 {
            let src = rng.gen_range(0..38);
            let mut v = vec![0.0f32; dim];
            v[src] = 1.0;
            v[(src + 1) % dim] = 0.2;
            let t = format!("Rephrased question {d}?");
            table.insert(t.clone(), v);
            let orig = format!("Distinct question {src}?");
            let pos = texts.iter().position(|t| *t == orig).unwrap();
            let at = rng.gen_range(pos + 1..=texts.len());
            texts.insert(at, t);
        }
        let vectors: Vec<Vec<f32>> = texts.iter().map(|t| table[t].clone()).collect();
        assert_eq!(brute_force_survivors(&vectors, 0.925), 38);

        let mut responses = Vec::new();
        let cfg = QaembConfig {
            prompts: 5,
            refs_per_prompt: 3,
            theta: 0.925,
        };
        let c = corpus();
        let docs: Vec<&str> = c.documents().iter().map(|d| d.text.as_str()).collect();
        for (i, chunk) in texts.chunks(10).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(2, &format!("qaemb/{i}")));
            let refs = draw(&mut rng, &docs, 3);
            let prompt = render_qaemb_prompt(&refs, DEFAULT_EXAMPLE_QUESTIONS);
            responses.push((prompt, numbered(chunk)));
        }
        let llm = ScriptedLlm::from_pairs(responses).unwrap();
        let bank = qaemb_generate(
            &c,
            DEFAULT_EXAMPLE_QUESTIONS,
            &llm,
            &TableEncoder(table),
            &cfg,
            &DecodeParams::generation(),
            2,
        )
        .unwrap();
        assert_eq!(bank.m(), 38);
        assert!(bank.texts().iter().all(|t| t.starts_with("Distinct")));
    }

    #[test]
    fn all_unparseable_is_a_parse_error() {
        let llm = ConstLlm("no questions here".into());
        let cfg = QaembConfig {
            prompts: 2,
            ..QaembConfig::default()
        };
        let err = qaemb_generate(
            &corpus(),
            DEFAULT_EXAMPLE_QUESTIONS,
            &llm,
            &mock_encoder(1, 16),
            &cfg,
            &DecodeParams::generation(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, CqgError::Parse(_)));
    }

    #[test]
    fn examples_required() {
        let llm = ConstLlm("1. Is it?".into());
        let none: [&str; 0] = [];
        let err = qaemb_generate(
            &corpus(),
            &none,
            &llm,
            &mock_encoder(1, 16),
            &QaembConfig::default(),
            &DecodeParams::generation(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, CqgError::NoExamples));
    }
}
