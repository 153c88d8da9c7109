//! Exact cosine top-K search over a gallery of unit-norm image embeddings,
//! plus the on-disk index format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "SETRIDX" <version: u8 = b'1'>
//! dim: u32, count: u64
//! count × { len: u32, utf8 id bytes }
//! count × dim × f32            (row-major)
//! crc32: u32                   (over every byte between the magic and the crc)
//! ```

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::types::ScoredCandidate;
use crate::vector::{dot_slices, normalize, EmbeddingVector, VectorError};

const MAGIC_PREFIX: &[u8; 7] = b"SETRIDX";
const FORMAT_VERSION: u8 = b'1';
const MAGIC_LEN: usize = 8;
const CRC_LEN: usize = 4;

/// Rows per scan shard when the caller does not pick a shard count.
const DEFAULT_ROWS_PER_SHARD: usize = 4096;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate image id {0:?}")]
    DuplicateId(String),
    #[error("dimension mismatch for {id:?}: expected {expected}, found {found}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid vector for {id:?}: {source}")]
    InvalidVector {
        id: String,
        #[source]
        source: VectorError,
    },
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not an index file")]
    NotAnIndex { path: PathBuf },
    #[error("{path}: unsupported index format version {found:#04x}")]
    FormatVersionMismatch { path: PathBuf, found: u8 },
    #[error("{path}: checksum mismatch (file truncated or corrupted)")]
    ChecksumMismatch { path: PathBuf },
    #[error("{path}: malformed payload: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}:{line}: {reason}")]
    ParseFailure {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

impl IndexError {
    /// The id that triggered the error, when there is one.
    pub fn offending_id(&self) -> Option<&str> {
        match self {
            IndexError::DuplicateId(id)
            | IndexError::DimensionMismatch { id, .. }
            | IndexError::InvalidVector { id, .. } => Some(id),
            _ => None,
        }
    }
}

/// Immutable gallery of normalized rows with an id lookup table.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<f32>,
    lookup: HashMap<String, usize>,
}

impl GalleryIndex {
    /// Normalizes every vector and builds the index. Ids must be distinct and
    /// all vectors must share one dimension.
    pub fn build<I, S>(items: I) -> Result<Self, IndexError>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut dim = None;
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        let mut lookup = HashMap::new();
        for (id, raw) in items {
            let id = id.into();
            let expected = *dim.get_or_insert(raw.len());
            if raw.len() != expected {
                return Err(IndexError::DimensionMismatch {
                    id,
                    expected,
                    found: raw.len(),
                });
            }
            let v = normalize(&raw).map_err(|source| IndexError::InvalidVector {
                id: id.clone(),
                source,
            })?;
            if lookup.insert(id.clone(), ids.len()).is_some() {
                return Err(IndexError::DuplicateId(id));
            }
            rows.extend_from_slice(v.as_slice());
            ids.push(id);
        }
        Ok(Self {
            dim: dim.unwrap_or(0),
            ids,
            rows,
            lookup,
        })
    }

    /// Builds from already-normalized vectors; bits are kept as is.
    pub fn from_vectors<I, S>(items: I) -> Result<Self, IndexError>
    where
        I: IntoIterator<Item = (S, EmbeddingVector)>,
        S: Into<String>,
    {
        let mut dim = None;
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        let mut lookup = HashMap::new();
        for (id, v) in items {
            let id = id.into();
            let expected = *dim.get_or_insert(v.dim());
            if v.dim() != expected {
                return Err(IndexError::DimensionMismatch {
                    id,
                    expected,
                    found: v.dim(),
                });
            }
            if lookup.insert(id.clone(), ids.len()).is_some() {
                return Err(IndexError::DuplicateId(id));
            }
            rows.extend_from_slice(v.as_slice());
            ids.push(id);
        }
        Ok(Self {
            dim: dim.unwrap_or(0),
            ids,
            rows,
            lookup,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.lookup.contains_key(id)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.lookup.get(id).map(|&i| self.row(i))
    }

    fn check_query(&self, q: &EmbeddingVector, k: usize) -> Result<(), IndexError> {
        if self.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if q.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                id: "<query>".into(),
                expected: self.dim,
                found: q.dim(),
            });
        }
        Ok(())
    }

    /// Exact top-`k` by cosine similarity, ties broken by ascending id.
    /// Returns `min(k, len)` candidates with ranks `1..`.
    pub fn search_topk(
        &self,
        q: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<ScoredCandidate>, IndexError> {
        let shards = self.len().div_ceil(DEFAULT_ROWS_PER_SHARD).max(1);
        self.search_topk_sharded(q, k, shards)
    }

    /// [`search_topk`](Self::search_topk) with an explicit shard count. The
    /// output does not depend on `shards`.
    pub fn search_topk_sharded(
        &self,
        q: &EmbeddingVector,
        k: usize,
        shards: usize,
    ) -> Result<Vec<ScoredCandidate>, IndexError> {
        self.check_query(q, k)?;
        let n = self.len();
        let shards = shards.clamp(1, n);
        let per_shard = n.div_ceil(shards);
        let query = q.as_slice();

        let partials: Vec<Vec<Hit<'_>>> = (0..shards)
            .into_par_iter()
            .map(|s| {
                let start = s * per_shard;
                let end = ((s + 1) * per_shard).min(n);
                self.scan_range(query, start..end, k)
            })
            .collect();

        let mut merged: Vec<Hit<'_>> = partials.into_iter().flatten().collect();
        merged.sort_unstable();
        merged.truncate(k);
        Ok(merged
            .into_iter()
            .enumerate()
            .map(|(i, h)| ScoredCandidate::coarse(h.id, h.score, i + 1))
            .collect())
    }

    fn scan_range(&self, query: &[f32], range: std::ops::Range<usize>, k: usize) -> Vec<Hit<'_>> {
        // Max-heap under the ranking order: the top is the worst kept hit.
        let mut heap: BinaryHeap<Hit<'_>> = BinaryHeap::with_capacity(k + 1);
        for i in range {
            let hit = Hit {
                score: dot_slices(self.row(i), query),
                id: &self.ids[i],
            };
            if heap.len() < k {
                heap.push(hit);
            } else if let Some(worst) = heap.peek() {
                if hit < *worst {
                    heap.pop();
                    heap.push(hit);
                }
            }
        }
        heap.into_vec()
    }

    /// Cosine similarity of `q` against each listed id, in input order.
    /// Unknown ids yield `None`.
    pub fn score_ids(
        &self,
        q: &EmbeddingVector,
        ids: &[&str],
    ) -> Result<Vec<Option<f64>>, IndexError> {
        self.check_query(q, 1)?;
        Ok(ids
            .iter()
            .map(|id| self.vector(id).map(|row| dot_slices(row, q.as_slice())))
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(MAGIC_LEN + 12 + self.rows.len() * 4 + CRC_LEN);
        buf.extend_from_slice(MAGIC_PREFIX);
        buf.push(FORMAT_VERSION);
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for id in &self.ids {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
        }
        for x in &self.rows {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf[MAGIC_LEN..]);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| IndexError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = fs::read(path).map_err(|source| IndexError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }

    /// Parses the file format; `origin` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self, IndexError> {
        let path = || origin.to_path_buf();
        if bytes.len() < MAGIC_LEN {
            // A strict prefix of the magic is a truncated index.
            return if MAGIC_PREFIX.starts_with(&bytes[..bytes.len().min(7)]) {
                Err(IndexError::ChecksumMismatch { path: path() })
            } else {
                Err(IndexError::NotAnIndex { path: path() })
            };
        }
        if &bytes[..7] != MAGIC_PREFIX {
            return Err(IndexError::NotAnIndex { path: path() });
        }
        if bytes[7] != FORMAT_VERSION {
            return Err(IndexError::FormatVersionMismatch {
                path: path(),
                found: bytes[7],
            });
        }
        if bytes.len() < MAGIC_LEN + CRC_LEN {
            return Err(IndexError::ChecksumMismatch { path: path() });
        }
        let (payload, crc_bytes) = bytes[MAGIC_LEN..].split_at(bytes.len() - MAGIC_LEN - CRC_LEN);
        let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        if crc32fast::hash(payload) != stored {
            return Err(IndexError::ChecksumMismatch { path: path() });
        }

        let malformed = |reason: &str| IndexError::Malformed {
            path: path(),
            reason: reason.to_string(),
        };
        let mut cur = Cursor { buf: payload, pos: 0 };
        let dim = cur.u32().ok_or_else(|| malformed("header"))? as usize;
        let count = cur.u64().ok_or_else(|| malformed("header"))? as usize;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        let mut lookup = HashMap::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let len = cur.u32().ok_or_else(|| malformed("id table"))? as usize;
            let raw = cur.take(len).ok_or_else(|| malformed("id table"))?;
            let id = std::str::from_utf8(raw)
                .map_err(|_| malformed("id is not utf-8"))?
                .to_string();
            if lookup.insert(id.clone(), i).is_some() {
                return Err(IndexError::DuplicateId(id));
            }
            ids.push(id);
        }
        let n_floats = count
            .checked_mul(dim)
            .ok_or_else(|| malformed("matrix size overflow"))?;
        let raw = cur
            .take(n_floats * 4)
            .ok_or_else(|| malformed("matrix"))?;
        if cur.pos != payload.len() {
            return Err(malformed("trailing bytes"));
        }
        let rows = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            dim,
            ids,
            rows,
            lookup,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Hit<'a> {
    score: f64,
    id: &'a str,
}

impl Ord for Hit<'_> {
    // Less = ranks earlier.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.id.cmp(other.id))
    }
}

impl PartialOrd for Hit<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Hit<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Hit<'_> {}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// One line of an embedding dump: `{"image_id": ..., "vector": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub vector: Vec<f64>,
}

/// Reads a JSON-lines embedding dump. Blank lines are skipped.
pub fn read_embeddings_jsonl(path: &Path) -> Result<Vec<EmbeddingRecord>, IndexError> {
    let file = fs::File::open(path).map_err(|source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| IndexError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord =
            serde_json::from_str(&line).map_err(|e| IndexError::ParseFailure {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        out.push(rec);
    }
    Ok(out)
}
