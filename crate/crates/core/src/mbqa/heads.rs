use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use super::MbqaError;
use crate::binary::{BinaryMatrix, Cursor};
use crate::corpus::Document;
use crate::providers::{embed_all, Embedding, EncoderError, EncoderProvider};

const MAGIC: &[u8; 4] = b"QMBH";
const VERSION: u32 = 1;
const EMBED_BATCH: usize = 64;

/// One MLP head per question: `logit = w2 . relu(W1 e + b1) + b2`.
///
/// Parameters are stored head after head; within a head the order is
/// `W1` (row-major `h x d`), `b1` (`h`), `w2` (`h`), `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MbqaHeads {
    pub m: usize,
    pub d: usize,
    pub h: usize,
    pub seed: u64,
    /// Default decision threshold.
    pub tau: f64,
    pub bank_fingerprint: String,
    params: Vec<f32>,
}

pub(crate) fn head_len(d: usize, h: usize) -> usize {
    h * d + 2 * h + 1
}

/// Forward pass of one head given its parameter block.
pub(crate) fn forward<P: Copy + Into<f64>>(p: &[P], d: usize, h: usize, e: &[f64]) -> f64 {
    let (w1, rest) = p.split_at(h * d);
    let (b1, rest) = rest.split_at(h);
    let (w2, b2) = rest.split_at(h);
    let mut z = b2[0].into();
    for j in 0..h {
        let row = &w1[j * d..(j + 1) * d];
        let pre: f64 = b1[j].into() + row.iter().zip(e).map(|(&w, &x)| w.into() * x).sum::<f64>();
        if pre > 0.0 {
            z += w2[j].into() * pre;
        }
    }
    z
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let ez = z.exp();
        ez / (1.0 + ez)
    }
}

impl MbqaHeads {
    /// Assemble heads from a flat parameter vector.
    pub fn from_params(
        m: usize,
        d: usize,
        h: usize,
        seed: u64,
        tau: f64,
        bank_fingerprint: impl Into<String>,
        params: Vec<f32>,
    ) -> Result<Self, MbqaError> {
        if params.len() != m * head_len(d, h) {
            return Err(MbqaError::Config(format!(
                "{} parameters for {m} heads of size {}",
                params.len(),
                head_len(d, h)
            )));
        }
        if params.iter().any(|x| !x.is_finite()) {
            return Err(MbqaError::Config("non-finite parameter".into()));
        }
        Ok(Self {
            m,
            d,
            h,
            seed,
            tau,
            bank_fingerprint: bank_fingerprint.into(),
            params,
        })
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    /// Parameter block of head `i`.
    pub fn head(&self, i: usize) -> &[f32] {
        let n = head_len(self.d, self.h);
        &self.params[i * n..(i + 1) * n]
    }

    fn check_dim(&self, e: &Embedding) -> Result<(), MbqaError> {
        if e.dim() != self.d {
            return Err(MbqaError::Dimension {
                expected: self.d,
                got: e.dim(),
            });
        }
        Ok(())
    }

    /// All `m` probabilities for one embedding.
    pub fn probabilities_for(&self, e: &Embedding) -> Result<Vec<f64>, MbqaError> {
        self.check_dim(e)?;
        let x: Vec<f64> = e.values().iter().map(|&v| v as f64).collect();
        Ok((0..self.m)
            .map(|i| sigmoid(forward(self.head(i), self.d, self.h, &x)))
            .collect())
    }

    /// Header `QMBH`, version, m, d, h, seed, tau, bank fingerprint, then
    /// the f32 parameters little-endian.
    pub fn save(&self, path: &Path) -> Result<(), MbqaError> {
        let mut buf = Vec::with_capacity(64 + 4 * self.params.len());
        buf.extend_from_slice(MAGIC);
        for v in [VERSION, self.m as u32, self.d as u32, self.h as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.tau.to_le_bytes());
        buf.extend_from_slice(&(self.bank_fingerprint.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.bank_fingerprint.as_bytes());
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        let io_err = |source| MbqaError::Io {
            path: path.to_path_buf(),
            source,
        };
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, MbqaError> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|source| MbqaError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let bad = |message: &str| MbqaError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        };
        let mut cur = Cursor { buf: &buf, pos: 0 };
        if cur.take(4) != Some(MAGIC.as_slice()) {
            return Err(bad("bad magic"));
        }
        let short = || bad("truncated header");
        if cur.u32().ok_or_else(short)? != VERSION {
            return Err(bad("unsupported version"));
        }
        let m = cur.u32().ok_or_else(short)? as usize;
        let d = cur.u32().ok_or_else(short)? as usize;
        let h = cur.u32().ok_or_else(short)? as usize;
        let seed = cur.u64().ok_or_else(short)?;
        let tau = cur.f64().ok_or_else(short)?;
        let fingerprint = cur.string().ok_or_else(short)?;
        let n = m * head_len(d, h);
        let raw = cur.take(4 * n).ok_or_else(|| bad("truncated parameters"))?;
        if cur.pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        let params = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::from_params(m, d, h, seed, tau, fingerprint, params)
            .map_err(|e| bad(&e.to_string()))
    }
}

/// Logit of head `i` for embedding `e`.
pub fn head_forward(heads: &MbqaHeads, e: &Embedding, i: usize) -> Result<f64, MbqaError> {
    heads.check_dim(e)?;
    if i >= heads.m {
        return Err(MbqaError::UnknownQuestion {
            question: i,
            m: heads.m,
        });
    }
    let x: Vec<f64> = e.values().iter().map(|&v| v as f64).collect();
    Ok(forward(heads.head(i), heads.d, heads.h, &x))
}

/// `y_i = 1` iff `p_i > tau`.
pub fn binarize(probabilities: &[f64], tau: f64) -> Vec<bool> {
    probabilities.iter().map(|&p| p > tau).collect()
}

/// Probabilities for many embeddings, one row each, in parallel.
pub fn probabilities(heads: &MbqaHeads, embeddings: &[Embedding]) -> Result<Vec<Vec<f64>>, MbqaError> {
    embeddings
        .par_iter()
        .map(|e| heads.probabilities_for(e))
        .collect()
}

/// Threshold probability rows into a binary matrix.
pub fn threshold(
    ids: &[String],
    probabilities: &[Vec<f64>],
    m: usize,
    tau: f64,
    bank_fingerprint: &str,
) -> Result<BinaryMatrix, MbqaError> {
    let mut out = BinaryMatrix::new(m, bank_fingerprint);
    for (id, p) in ids.iter().zip(probabilities) {
        out.push_row(id.clone(), &binarize(p, tau))?;
    }
    Ok(out)
}

fn encode(
    ids: &[String],
    texts: &[&str],
    encoder: &dyn EncoderProvider,
) -> Result<Vec<Embedding>, MbqaError> {
    embed_all(encoder, texts, EMBED_BATCH).map_err(|source| {
        let document_id = match &source {
            EncoderError::Failed { index, .. } => ids.get(*index).cloned().unwrap_or_default(),
            EncoderError::CountMismatch { .. } => String::new(),
        };
        MbqaError::Encoder {
            document_id,
            source,
        }
    })
}

/// Binary embeddings for `(id, text)` rows: one encoder pass, then every
/// head, then the threshold.
pub fn embed_texts(
    ids: &[String],
    texts: &[&str],
    encoder: &dyn EncoderProvider,
    heads: &MbqaHeads,
    tau: f64,
) -> Result<BinaryMatrix, MbqaError> {
    let embeddings = encode(ids, texts, encoder)?;
    let probs = probabilities(heads, &embeddings)?;
    threshold(ids, &probs, heads.m, tau, &heads.bank_fingerprint)
}

pub fn embed_documents(
    docs: &[Document],
    encoder: &dyn EncoderProvider,
    heads: &MbqaHeads,
    tau: f64,
) -> Result<BinaryMatrix, MbqaError> {
    let ids: Vec<String> = docs.iter().map(|d| d.id.clone()).collect();
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    embed_texts(&ids, &texts, encoder, heads, tau)
}
