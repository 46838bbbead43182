//! Bit-packed binary embeddings. Column `j` of a row lives in byte `j / 8`,
//! bit `j % 8` (least significant first).

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"QBIN";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum BinaryError {
    #[error("row has {got} bits, matrix has {expected} columns")]
    Width { expected: usize, got: usize },
    #[error("column count {m_prime} outside 1..={m}")]
    Truncation { m_prime: usize, m: usize },
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed binary matrix {path}: {message}")]
    Format { path: PathBuf, message: String },
}

/// `n` documents by `m` question bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMatrix {
    m: usize,
    row_ids: Vec<String>,
    bits: Vec<u8>,
    /// Fingerprint of the question bank that defines the columns.
    pub bank_fingerprint: String,
}

fn bytes_for(m: usize) -> usize {
    m.div_ceil(8)
}

/// Pack a bool slice into bytes.
pub fn pack(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bytes_for(bits.len())];
    for (j, &b) in bits.iter().enumerate() {
        if b {
            out[j / 8] |= 1 << (j % 8);
        }
    }
    out
}

/// `popcount(a AND b)` over packed rows.
pub fn and_popcount(a: &[u8], b: &[u8]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x & y).count_ones()).sum()
}

/// `popcount(a OR b)` over packed rows.
pub fn or_popcount(a: &[u8], b: &[u8]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x | y).count_ones()).sum()
}

impl BinaryMatrix {
    pub fn new(m: usize, bank_fingerprint: impl Into<String>) -> Self {
        Self {
            m,
            row_ids: Vec::new(),
            bits: Vec::new(),
            bank_fingerprint: bank_fingerprint.into(),
        }
    }

    pub fn n(&self) -> usize {
        self.row_ids.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    fn stride(&self) -> usize {
        bytes_for(self.m)
    }

    pub fn push_row(&mut self, id: impl Into<String>, bits: &[bool]) -> Result<(), BinaryError> {
        if bits.len() != self.m {
            return Err(BinaryError::Width {
                expected: self.m,
                got: bits.len(),
            });
        }
        self.row_ids.push(id.into());
        self.bits.extend(pack(bits));
        Ok(())
    }

    /// Packed bytes of row `r`.
    pub fn packed_row(&self, r: usize) -> &[u8] {
        let s = self.stride();
        &self.bits[r * s..(r + 1) * s]
    }

    pub fn get(&self, r: usize, j: usize) -> bool {
        assert!(j < self.m, "column {j} out of range");
        self.packed_row(r)[j / 8] >> (j % 8) & 1 == 1
    }

    pub fn row(&self, r: usize) -> Vec<bool> {
        (0..self.m).map(|j| self.get(r, j)).collect()
    }

    /// Row `r` with bits as 0.0/1.0.
    pub fn row_f32(&self, r: usize) -> Vec<f32> {
        (0..self.m).map(|j| self.get(r, j) as u8 as f32).collect()
    }

    pub fn popcount(&self, r: usize) -> u32 {
        self.packed_row(r).iter().map(|b| b.count_ones()).sum()
    }

    /// Keep the first `m_prime` columns.
    pub fn truncate(&self, m_prime: usize) -> Result<Self, BinaryError> {
        if m_prime == 0 || m_prime > self.m {
            return Err(BinaryError::Truncation { m_prime, m: self.m });
        }
        let mut out = Self::new(m_prime, self.bank_fingerprint.clone());
        for r in 0..self.n() {
            let row = self.row(r);
            out.push_row(self.row_ids[r].clone(), &row[..m_prime])?;
        }
        Ok(out)
    }

    /// Header `QBIN`, version, n, m, fingerprint, row ids, then packed rows.
    pub fn save(&self, path: &Path) -> Result<(), BinaryError> {
        let mut buf = Vec::with_capacity(32 + self.bits.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.n() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.m as u64).to_le_bytes());
        put_str(&mut buf, &self.bank_fingerprint);
        for id in &self.row_ids {
            put_str(&mut buf, id);
        }
        buf.extend_from_slice(&self.bits);
        let io_err = |source| BinaryError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io_err)?;
        f.write_all(&buf).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, BinaryError> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|source| BinaryError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let bad = |message: &str| BinaryError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        };
        let mut cur = Cursor { buf: &buf, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad("unsupported version"));
        }
        let n = cur.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let m = cur.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let bank_fingerprint = cur.string().ok_or_else(|| bad("truncated fingerprint"))?;
        let mut row_ids = Vec::with_capacity(n);
        for _ in 0..n {
            row_ids.push(cur.string().ok_or_else(|| bad("truncated row ids"))?);
        }
        let bits = cur.take(n * bytes_for(m)).ok_or_else(|| bad("truncated rows"))?.to_vec();
        if cur.pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            m,
            row_ids,
            bits,
            bank_fingerprint,
        })
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub(crate) struct Cursor<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    pub fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    pub fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    pub fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    pub fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}
