use std::collections::HashMap;
use std::sync::RwLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::hashing::derive_seed;

/// A dense text embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// Scale to unit L2 norm. A zero vector is returned unchanged.
    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            for x in &mut self.0 {
                *x = (*x as f64 / n) as f32;
            }
        }
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("encoder returned {got} embeddings for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("encoder failed on text {index}: {message}")]
    Failed { index: usize, message: String },
}

/// A frozen text encoder.
pub trait EncoderProvider: Send + Sync {
    fn dimension(&self) -> usize;

    /// Stable identity of the encoder and its settings.
    fn fingerprint(&self) -> String;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EncoderError>;

    fn embed(&self, text: &str) -> Result<Embedding, EncoderError> {
        let mut out = self.embed_batch(&[text])?;
        out.pop().ok_or(EncoderError::CountMismatch {
            expected: 1,
            got: 0,
        })
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "do", "does", "for", "from", "has", "have",
    "in", "is", "it", "its", "of", "on", "or", "that", "the", "this", "to", "was", "with",
];

/// Deterministic offline encoder: a bag of lowercase word tokens (minus a
/// short stopword list), each mapped to a seeded Gaussian vector, summed and
/// normalized. Texts sharing more tokens land closer together.
pub struct MockEncoder {
    seed: u64,
    dim: usize,
    token_vectors: RwLock<HashMap<String, Vec<f64>>>,
}

impl MockEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim >= 2, "mock encoder needs at least 2 dimensions");
        Self {
            seed,
            dim,
            token_vectors: RwLock::new(HashMap::new()),
        }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        if let Some(v) = self.token_vectors.read().expect("lock").get(token) {
            return v.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, token));
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        self.token_vectors
            .write()
            .expect("lock")
            .insert(token.to_owned(), v.clone());
        v
    }

    fn embed_one(&self, text: &str) -> Embedding {
        let lower = text.to_lowercase();
        let tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty() && !STOPWORDS.contains(t))
            .collect();
        let mut acc = vec![0.0f64; self.dim];
        if tokens.is_empty() {
            // no content tokens: fall back to a vector keyed by the whole text
            let key = format!("\u{0}{text}");
            acc = self.token_vector(&key);
        }
        for t in tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        Embedding(acc.into_iter().map(|x| (x / norm) as f32).collect())
    }
}

impl EncoderProvider for MockEncoder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("mock-encoder:seed={}:dim={}", self.seed, self.dim)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EncoderError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Create the deterministic mock encoder.
pub fn mock_encoder(seed: u64, dim: usize) -> MockEncoder {
    MockEncoder::new(seed, dim)
}

/// Embed many texts in chunks, checking the provider's output count.
pub fn embed_all(
    encoder: &dyn EncoderProvider,
    texts: &[&str],
    batch_size: usize,
) -> Result<Vec<Embedding>, EncoderError> {
    let mut out = Vec::with_capacity(texts.len());
    for (b, chunk) in texts.chunks(batch_size.max(1)).enumerate() {
        let got = encoder.embed_batch(chunk).map_err(|e| match e {
            EncoderError::Failed { index, message } => EncoderError::Failed {
                index: b * batch_size.max(1) + index,
                message,
            },
            other => other,
        })?;
        if got.len() != chunk.len() {
            return Err(EncoderError::CountMismatch {
                expected: chunk.len(),
                got: got.len(),
            });
        }
        out.extend(got);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_text_same_vector() {
        let enc = mock_encoder(7, 64);
        assert_eq!(enc.embed("red cat").unwrap(), enc.embed("red cat").unwrap());
        // a fresh instance with the same seed agrees too
        assert_eq!(
            enc.embed("red cat").unwrap(),
            mock_encoder(7, 64).embed("red cat").unwrap()
        );
    }

    #[test]
    fn vectors_are_unit_norm() {
        let enc = mock_encoder(7, 64);
        for t in ["red cat", "", "!!!", "a much longer sentence about nothing at all"] {
            let e = enc.embed(t).unwrap();
            assert!((e.norm() - 1.0).abs() < 1e-6, "{t:?} norm {}", e.norm());
        }
    }

    #[test]
    fn token_overlap_raises_similarity() {
        let enc = mock_encoder(7, 64);
        let a = enc.embed("red cat").unwrap();
        let b = enc.embed("red cat dog").unwrap();
        let c = enc.embed("quantum flux").unwrap();
        assert!(a.dot(&b) > a.dot(&c), "{} vs {}", a.dot(&b), a.dot(&c));
    }

    proptest! {
        #[test]
        fn batch_equals_per_item(texts in proptest::collection::vec("[a-e ]{0,12}", 1..8)) {
            let enc = mock_encoder(3, 16);
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let batch = enc.embed_batch(&refs).unwrap();
            prop_assert_eq!(batch.len(), texts.len());
            for (t, b) in texts.iter().zip(&batch) {
                let single = enc.embed(t).unwrap();
                for (x, y) in single.values().iter().zip(b.values()) {
                    prop_assert!((x - y).abs() <= 1e-6);
                }
                let self_sim = b.dot(b);
                prop_assert!((self_sim - 1.0).abs() < 1e-6);
            }
            for a in &batch {
                for b in &batch {
                    let c = a.dot(b);
                    prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&c));
                }
            }
        }
    }
}
