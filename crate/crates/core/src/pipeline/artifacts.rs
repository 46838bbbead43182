use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{io_err, PipelineError};
use crate::binary::Cursor;
use crate::providers::Embedding;

const MAGIC: &[u8; 4] = b"QEMB";
const VERSION: u32 = 1;

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

/// Dense embedding matrix: header `QEMB`, version, n, d, encoder
/// fingerprint, row ids, then little-endian `f32` rows.
pub fn save_dense(
    path: &Path,
    encoder_fingerprint: &str,
    ids: &[String],
    rows: &[Embedding],
) -> Result<(), PipelineError> {
    let d = rows.first().map_or(0, Embedding::dim);
    let mut buf = Vec::with_capacity(32 + rows.len() * d * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u64).to_le_bytes());
    put_str(&mut buf, encoder_fingerprint);
    for id in ids {
        put_str(&mut buf, id);
    }
    for r in rows {
        assert_eq!(r.dim(), d, "rows share one dimension");
        for v in r.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(io_err(path))
}

/// Read a dense matrix written by [`save_dense`]: (encoder fingerprint, ids, rows).
pub fn load_dense(path: &Path) -> Result<(String, Vec<String>, Vec<Embedding>), PipelineError> {
    let buf = fs::read(path).map_err(io_err(path))?;
    let bad = |m: &str| PipelineError::Config(format!("malformed embedding file {}: {m}", path.display()));
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4) != Some(MAGIC.as_slice()) {
        return Err(bad("bad magic"));
    }
    if cur.u32() != Some(VERSION) {
        return Err(bad("unsupported version"));
    }
    let n = cur.u64().ok_or_else(|| bad("truncated header"))? as usize;
    let d = cur.u64().ok_or_else(|| bad("truncated header"))? as usize;
    let fp = cur.string().ok_or_else(|| bad("truncated header"))?;
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        ids.push(cur.string().ok_or_else(|| bad("truncated ids"))?);
    }
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let raw = cur.take(d * 4).ok_or_else(|| bad("truncated rows"))?;
        rows.push(Embedding(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ));
    }
    if cur.pos != buf.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((fp, ids, rows))
}

pub(crate) fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("serializable"));
        s.push('\n');
    }
    s
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(to_jsonl(items).as_bytes()).map_err(io_err(path))
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            PipelineError::Config(format!("malformed record {}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}
