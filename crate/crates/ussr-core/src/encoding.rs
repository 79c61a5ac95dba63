//! Feature preprocessing: signed log transform for dense fields,
//! frequency-ranked indexing for sparse fields, batch assembly, and the
//! binary dataset cache.
//!
//! Index 0 of every sparse vocabulary is reserved: unseen categories and
//! categories ranked past the cap both land there, so one embedding row
//! absorbs the whole tail.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

const CACHE_MAGIC: &[u8] = b"USSRENC1";
const STATS_MAGIC: &[u8] = b"USSRSTA1";

/// One parsed input row before encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub dense: Vec<f64>,
    pub sparse: Vec<String>,
    pub label: u8,
    pub segment: u32,
}

/// One encoded example: log-transformed dense values, ranked sparse indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub dense: Vec<f64>,
    pub sparse: Vec<u32>,
    pub label: u8,
    pub segment: u32,
}

/// Fitted preprocessing state, reused verbatim for validation and test.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    /// Whether the signed log transform applies, per dense field.
    dense_log: Vec<bool>,
    /// Per sparse field: category string to index in `1..=cap`.
    maps: Vec<BTreeMap<String, u32>>,
    cap: u32,
    embed_dim: usize,
}

impl FeatureStats {
    /// Ranks every category of every sparse field by descending frequency,
    /// ties broken by the category string. Rank `i` gets index `i` starting
    /// at 1; ranks past `cap` are dropped and resolve to 0 on lookup.
    pub fn fit(rows: &[RawRow], cap: u32, embed_dim: usize) -> Result<FeatureStats> {
        let first = rows.first().ok_or(CoreError::invalid("cannot fit stats on empty input"))?;
        let n_dense = first.dense.len();
        let n_sparse = first.sparse.len();
        if cap == 0 || embed_dim == 0 {
            return Err(CoreError::invalid("cap and embed_dim must be positive"));
        }

        let mut counts: Vec<BTreeMap<&str, u64>> = vec![BTreeMap::new(); n_sparse];
        for (row_no, row) in rows.iter().enumerate() {
            if row.dense.len() != n_dense || row.sparse.len() != n_sparse {
                return Err(CoreError::invalid(alloc::format!(
                    "row {row_no}: field count differs from first row"
                )));
            }
            for (f, cat) in row.sparse.iter().enumerate() {
                *counts[f].entry(cat.as_str()).or_insert(0) += 1;
            }
        }

        let mut maps = Vec::with_capacity(n_sparse);
        for field in counts {
            let mut ranked: Vec<(&str, u64)> = field.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            let mut map = BTreeMap::new();
            for (rank, (cat, _)) in ranked.into_iter().enumerate() {
                let index = rank as u32 + 1;
                if index > cap {
                    break;
                }
                map.insert(String::from(cat), index);
            }
            maps.push(map);
        }

        Ok(FeatureStats {
            dense_log: vec![true; n_dense],
            maps,
            cap,
            embed_dim,
        })
    }

    pub fn n_dense(&self) -> usize {
        self.dense_log.len()
    }

    pub fn n_sparse(&self) -> usize {
        self.maps.len()
    }

    pub fn cap(&self) -> u32 {
        self.cap
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Embedding rows per sparse field: indices `0..=cap`.
    pub fn vocab_size(&self) -> usize {
        self.cap as usize + 1
    }

    /// Width of the model input after embedding lookup and concatenation.
    pub fn encoded_width(&self) -> usize {
        self.n_dense() + self.n_sparse() * self.embed_dim
    }

    pub fn index_of(&self, field: usize, category: &str) -> u32 {
        self.maps
            .get(field)
            .and_then(|m| m.get(category))
            .copied()
            .unwrap_or(0)
    }

    /// Encodes one row. `row_no` only feeds error messages.
    pub fn transform(&self, row: &RawRow, row_no: usize) -> Result<EncodedExample> {
        if row.dense.len() != self.n_dense() || row.sparse.len() != self.n_sparse() {
            return Err(CoreError::invalid(alloc::format!(
                "row {row_no}: expected {} dense and {} sparse fields, got {} and {}",
                self.n_dense(),
                self.n_sparse(),
                row.dense.len(),
                row.sparse.len()
            )));
        }
        if row.label > 1 {
            return Err(CoreError::invalid(alloc::format!(
                "row {row_no}: label {} is not 0 or 1",
                row.label
            )));
        }
        let mut dense = Vec::with_capacity(row.dense.len());
        for (i, &v) in row.dense.iter().enumerate() {
            if !v.is_finite() {
                return Err(CoreError::invalid(alloc::format!(
                    "row {row_no}: dense field {i} is not finite"
                )));
            }
            dense.push(if self.dense_log[i] { signed_log(v) } else { v });
        }
        let sparse = row
            .sparse
            .iter()
            .enumerate()
            .map(|(f, cat)| self.index_of(f, cat))
            .collect();
        Ok(EncodedExample {
            dense,
            sparse,
            label: row.label,
            segment: row.segment,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.put_bytes(STATS_MAGIC);
        w.put_u32(self.dense_log.len() as u32);
        for &f in &self.dense_log {
            w.put_u8(f as u8);
        }
        w.put_u32(self.cap);
        w.put_u32(self.embed_dim as u32);
        w.put_u32(self.maps.len() as u32);
        for map in &self.maps {
            w.put_u32(map.len() as u32);
            for (cat, &idx) in map {
                w.put_str(cat);
                w.put_u32(idx);
            }
        }
        w.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<FeatureStats> {
        let mut r = ByteReader::new(buf);
        let stats = Self::decode(&mut r)?;
        r.finish()?;
        Ok(stats)
    }

    pub(crate) fn encode(&self, w: &mut ByteWriter) {
        w.put_bytes(&self.to_bytes());
    }

    pub(crate) fn decode(r: &mut ByteReader<'_>) -> Result<FeatureStats> {
        r.expect_magic(STATS_MAGIC)?;
        let n_dense = r.take_u32()? as usize;
        let mut dense_log = Vec::with_capacity(n_dense);
        for _ in 0..n_dense {
            dense_log.push(r.take_u8()? != 0);
        }
        let cap = r.take_u32()?;
        let embed_dim = r.take_u32()? as usize;
        let n_sparse = r.take_u32()? as usize;
        let mut maps = Vec::with_capacity(n_sparse);
        for _ in 0..n_sparse {
            let n = r.take_u32()? as usize;
            let mut map = BTreeMap::new();
            for _ in 0..n {
                let cat = r.take_str()?;
                let idx = r.take_u32()?;
                if idx == 0 || idx > cap {
                    return Err(CoreError::decode(alloc::format!(
                        "stored sparse index {idx} outside 1..={cap}"
                    )));
                }
                map.insert(cat, idx);
            }
            maps.push(map);
        }
        Ok(FeatureStats {
            dense_log,
            maps,
            cap,
            embed_dim,
        })
    }
}

/// `ln(1+v)` for nonnegative `v`, `-ln(1-v)` for negative `v`; odd and
/// monotone, maps 0 to 0.
#[inline]
pub fn signed_log(v: f64) -> f64 {
    if v >= 0.0 {
        crate::fmath::ln_1p(v)
    } else {
        -crate::fmath::ln_1p(-v)
    }
}

/// An encoded dataset plus its field counts, as stored in the cache file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_dense: usize,
    pub n_sparse: usize,
    pub examples: Vec<EncodedExample>,
}

impl Dataset {
    pub fn new(n_dense: usize, n_sparse: usize, examples: Vec<EncodedExample>) -> Result<Dataset> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.dense.len() != n_dense || ex.sparse.len() != n_sparse {
                return Err(CoreError::invalid(alloc::format!(
                    "example {i} has wrong field counts"
                )));
            }
        }
        Ok(Dataset { n_dense, n_sparse, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Highest segment id plus one; 0 for an empty dataset.
    pub fn segment_count(&self) -> u32 {
        self.examples.iter().map(|e| e.segment + 1).max().unwrap_or(0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.put_bytes(CACHE_MAGIC);
        w.put_u32(self.n_dense as u32);
        w.put_u32(self.n_sparse as u32);
        w.put_u64(self.examples.len() as u64);
        for ex in &self.examples {
            for &v in &ex.dense {
                w.put_f64(v);
            }
            for &s in &ex.sparse {
                w.put_u32(s);
            }
            w.put_u8(ex.label);
            w.put_u32(ex.segment);
        }
        w.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Dataset> {
        let mut r = ByteReader::new(buf);
        r.expect_magic(CACHE_MAGIC)?;
        let n_dense = r.take_u32()? as usize;
        let n_sparse = r.take_u32()? as usize;
        let n_rows = r.take_u64()? as usize;
        let mut examples = Vec::with_capacity(n_rows);
        for _ in 0..n_rows {
            let mut dense = Vec::with_capacity(n_dense);
            for _ in 0..n_dense {
                dense.push(r.take_f64()?);
            }
            let mut sparse = Vec::with_capacity(n_sparse);
            for _ in 0..n_sparse {
                sparse.push(r.take_u32()?);
            }
            let label = r.take_u8()?;
            if label > 1 {
                return Err(CoreError::decode(alloc::format!("label {label} is not 0 or 1")));
            }
            let segment = r.take_u32()?;
            examples.push(EncodedExample { dense, sparse, label, segment });
        }
        r.finish()?;
        Dataset::new(n_dense, n_sparse, examples)
    }
}

/// A model-ready batch: dense block, one one-hot block per sparse field
/// (ready for embedding-table matmul), labels as a column, segment ids.
#[derive(Debug, Clone)]
pub struct Batch {
    pub dense: Tensor,
    pub sparse_onehot: Vec<Tensor>,
    pub labels: Tensor,
    pub segments: Vec<u32>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.segments.len()
    }

    /// Graph input map for the universal graphs: dense block, one-hot
    /// sparse fields, labels under "y".
    pub fn inputs(&self) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(String::from("dense"), self.dense.clone());
        for (f, t) in self.sparse_onehot.iter().enumerate() {
            m.insert(alloc::format!("sparse.{f}"), t.clone());
        }
        m.insert(String::from("y"), self.labels.clone());
        m
    }
}

/// `[b, vocab]` matrix with a single 1 per row.
pub fn one_hot(indices: &[u32], vocab: usize) -> Result<Tensor> {
    let b = indices.len();
    let mut data = vec![0.0; b * vocab];
    for (i, &idx) in indices.iter().enumerate() {
        let idx = idx as usize;
        if idx >= vocab {
            return Err(CoreError::invalid(alloc::format!(
                "sparse index {idx} outside vocabulary of {vocab}"
            )));
        }
        data[i * vocab + idx] = 1.0;
    }
    Tensor::new(vec![b, vocab], data)
}

/// Assembles the listed examples into one batch, in the given order.
pub fn make_batch(ds: &Dataset, idxs: &[usize], vocab: usize) -> Result<Batch> {
    let b = idxs.len();
    if b == 0 {
        return Err(CoreError::invalid("empty batch"));
    }
    let mut dense = Vec::with_capacity(b * ds.n_dense);
    let mut labels = Vec::with_capacity(b);
    let mut segments = Vec::with_capacity(b);
    let mut per_field: Vec<Vec<u32>> = vec![Vec::with_capacity(b); ds.n_sparse];
    for &i in idxs {
        let ex = &ds.examples[i];
        dense.extend_from_slice(&ex.dense);
        labels.push(ex.label as f64);
        segments.push(ex.segment);
        for (f, &s) in ex.sparse.iter().enumerate() {
            per_field[f].push(s);
        }
    }
    let sparse_onehot = per_field
        .iter()
        .map(|col| one_hot(col, vocab))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        dense: Tensor::new(vec![b, ds.n_dense.max(1)], if ds.n_dense == 0 { vec![0.0; b] } else { dense })?,
        sparse_onehot,
        labels: Tensor::new(vec![b, 1], labels)?,
        segments,
    })
}

/// Deterministic Fisher-Yates permutation of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Splits `order` into consecutive chunks of `batch_size`; the final chunk
/// may be short.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        out.push((start, end));
        start = end;
    }
    out
}
