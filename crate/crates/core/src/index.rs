//! Exact inner-product vector shards.
//!
//! Search is a full scan; results are totally ordered by
//! `(score desc, dataset asc, doc_id asc, shard_ordinal asc)` so merging
//! per-shard top-k lists reproduces the top-k of a single combined index.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SHARD_MAGIC: &[u8; 4] = b"RAGM";
pub const SHARD_VERSION: u32 = 1;
/// Per-shard and merged candidate depth.
pub const DEFAULT_TOP_K: usize = 100;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("row {row}: expected {expected} dims, got {got}")]
    DimMismatch {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("query has {got} dims, shard has {expected}")]
    QueryDims { expected: usize, got: usize },
    #[error("row {row}: non-finite value")]
    NonFinite { row: usize },
    #[error("{docs} doc ids for {vectors} vectors")]
    CountMismatch { docs: usize, vectors: usize },
    #[error("duplicate doc id {0:?} in shard")]
    DuplicateId(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("bad shard magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported shard version {0}")]
    BadVersion(u32),
    #[error("shard file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("shard file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("shard file corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IndexError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(pub Vec<f32>);

impl EmbeddingVector {
    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f32 {
        self.0.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.0.iter_mut().for_each(|v| *v /= n);
        }
        self
    }
}

impl From<Vec<f32>> for EmbeddingVector {
    fn from(v: Vec<f32>) -> Self {
        Self(v)
    }
}

/// Dot product with a fixed summation order, so equal inputs give equal bits
/// regardless of which shard or thread computes them.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |acc, (x, y)| acc + x * y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDocument {
    pub doc_id: String,
    pub dataset: String,
    pub score: f32,
    pub shard_ordinal: u32,
    /// Row of the document within its shard.
    pub row: u32,
}

impl ScoredDocument {
    /// The total result order: best first.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.dataset.cmp(&other.dataset))
            .then_with(|| self.doc_id.cmp(&other.doc_id))
            .then_with(|| self.shard_ordinal.cmp(&other.shard_ordinal))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardIndex {
    dims: usize,
    vectors: Vec<f32>,
    doc_ids: Vec<String>,
    dataset: String,
    normalized: bool,
}

impl ShardIndex {
    /// Builds a shard from `(doc_id, vector)` rows. With `normalized`, rows
    /// are scaled to unit length so inner products are cosines.
    pub fn build(
        dims: usize,
        rows: impl IntoIterator<Item = (String, EmbeddingVector)>,
        dataset: impl Into<String>,
        normalized: bool,
    ) -> Result<Self> {
        let mut vectors = Vec::new();
        let mut doc_ids = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (row, (id, v)) in rows.into_iter().enumerate() {
            if v.dims() != dims {
                return Err(IndexError::DimMismatch {
                    row,
                    expected: dims,
                    got: v.dims(),
                });
            }
            if v.0.iter().any(|x| !x.is_finite()) {
                return Err(IndexError::NonFinite { row });
            }
            if !seen.insert(id.clone()) {
                return Err(IndexError::DuplicateId(id));
            }
            let v = if normalized { v.normalized() } else { v };
            vectors.extend_from_slice(&v.0);
            doc_ids.push(id);
        }
        Ok(Self {
            dims,
            vectors,
            doc_ids,
            dataset: dataset.into(),
            normalized,
        })
    }

    /// Parallel-list form: `doc_ids[i]` labels `vectors[i]`.
    pub fn from_parts(
        dims: usize,
        doc_ids: Vec<String>,
        vectors: Vec<EmbeddingVector>,
        dataset: impl Into<String>,
        normalized: bool,
    ) -> Result<Self> {
        if doc_ids.len() != vectors.len() {
            return Err(IndexError::CountMismatch {
                docs: doc_ids.len(),
                vectors: vectors.len(),
            });
        }
        Self::build(dims, doc_ids.into_iter().zip(vectors), dataset, normalized)
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dataset(&self) -> &str {
        &self.dataset
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dims..(row + 1) * self.dims]
    }

    pub fn search(&self, query: &[f32], k: usize, shard_ordinal: u32) -> Result<Vec<ScoredDocument>> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if query.len() != self.dims {
            return Err(IndexError::QueryDims {
                expected: self.dims,
                got: query.len(),
            });
        }
        let mut hits: Vec<ScoredDocument> = (0..self.len())
            .map(|row| ScoredDocument {
                doc_id: self.doc_ids[row].clone(),
                dataset: self.dataset.clone(),
                score: dot(query, self.vector(row)),
                shard_ordinal,
                row: row as u32,
            })
            .collect();
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, ScoredDocument::rank_cmp);
            hits.truncate(k);
        }
        hits.sort_by(ScoredDocument::rank_cmp);
        Ok(hits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(SHARD_MAGIC)?;
        w.write_all(&SHARD_VERSION.to_le_bytes())?;
        w.write_all(&(self.dims as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&[self.normalized as u8])?;
        for v in &self.vectors {
            w.write_all(&v.to_le_bytes())?;
        }
        for id in &self.doc_ids {
            write_str(w, id)?;
        }
        write_str(w, &self.dataset)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != SHARD_MAGIC {
            return Err(IndexError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != SHARD_VERSION {
            return Err(IndexError::BadVersion(version));
        }
        let dims = r.u32("dims")? as usize;
        let count = usize::try_from(r.u64("count")?)
            .map_err(|_| IndexError::Corrupt("count overflows usize".into()))?;
        let normalized = match r.take(1, "normalized flag")?[0] {
            0 => false,
            1 => true,
            other => return Err(IndexError::Corrupt(format!("normalized flag {other}"))),
        };
        let floats = count
            .checked_mul(dims)
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or(IndexError::Truncated("vectors"))?;
        let raw = r.take(floats * 4, "vectors")?;
        let vectors: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut doc_ids = Vec::with_capacity(count.min(bytes.len()));
        for _ in 0..count {
            doc_ids.push(r.string("doc id table")?);
        }
        let dataset = r.string("dataset label")?;
        if r.pos != bytes.len() {
            return Err(IndexError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self {
            dims,
            vectors,
            doc_ids,
            dataset,
            normalized,
        })
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(IndexError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|e| IndexError::Corrupt(format!("{what}: {e}")))
    }
}

/// Global top-`k` over individually sorted per-shard result lists.
pub fn merge_topk(lists: impl IntoIterator<Item = Vec<ScoredDocument>>, k: usize) -> Vec<ScoredDocument> {
    let mut all: Vec<ScoredDocument> = lists.into_iter().flatten().collect();
    all.sort_by(ScoredDocument::rank_cmp);
    all.truncate(k);
    all
}

/// Fans a query out over all shards in parallel and merges the results.
/// Shard ordinals are positions in `shards`.
pub fn search_all(
    shards: &[ShardIndex],
    query: &[f32],
    k_per_shard: usize,
    k_merge: usize,
) -> Result<Vec<ScoredDocument>> {
    let lists = shards
        .par_iter()
        .enumerate()
        .map(|(i, s)| s.search(query, k_per_shard, i as u32))
        .collect::<Result<Vec<_>>>()?;
    Ok(merge_topk(lists, k_merge))
}
