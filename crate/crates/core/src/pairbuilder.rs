//! Reviser training data: collect key-queries pairs with the downstream model
//! and datastore, keep the most reliable keys, and map them onto their
//! upstream counterparts.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{Datastore, KnnIndex};
use crate::error::{ensure_dim, Error, Result};
use crate::toymodel::{Corpus, Position, ToyModel};
use crate::vecmath::Vector;

/// Queries that retrieved one downstream key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyQueryStats {
    pub key_index: usize,
    /// Sorted, unique.
    pub positions: Vec<Position>,
}

impl KeyQueryStats {
    pub fn count(&self) -> usize {
        self.positions.len()
    }
}

/// Retrieval statistics keyed by datastore index (keys never retrieved are absent).
pub type CollectedStats = BTreeMap<usize, KeyQueryStats>;

/// Re-traverses `corpus` with the downstream model; every position's query
/// retrieves `n_k` keys from the downstream store and is credited to each.
pub fn collect(model: &ToyModel, ds: &Datastore, corpus: &Corpus, n_k: usize) -> Result<CollectedStats> {
    if corpus.is_empty() {
        return Err(Error::contract("empty corpus"));
    }
    model.check_corpus(corpus)?;
    ensure_dim(ds.dim(), model.dims().repr_dim)?;
    if let Err(e) = ds.check_model(model) {
        log::warn!("collect: {e}");
    }
    let positions: Vec<Position> = corpus.positions().collect();
    let hits: Vec<Vec<usize>> = positions
        .par_iter()
        .map(|&p| {
            let (src, prefix, _) = corpus.context(p)?;
            let q = model.representation(src, prefix)?;
            Ok(ds.search(&q, n_k)?.into_iter().map(|n| n.index).collect())
        })
        .collect::<Result<_>>()?;

    let mut stats = CollectedStats::new();
    // Positions are visited in traversal order, so each list comes out sorted.
    for (p, keys) in positions.iter().zip(hits) {
        for k in keys {
            stats.entry(k).or_insert_with(|| KeyQueryStats { key_index: k, positions: Vec::new() }).positions.push(*p);
        }
    }
    Ok(stats)
}

/// Keeps the top `round_half_up(r% · |stats|)` keys (at least one) ranked by
/// Count(k') / Freq(v), ties to the lower index. Returned in index order.
pub fn filter(stats: &CollectedStats, ds: &Datastore, value_freqs: &HashMap<u32, u64>, r: f64) -> Result<Vec<usize>> {
    if !(r > 0.0 && r <= 100.0) {
        return Err(Error::contract(format!("retention percentage {r} outside (0, 100]")));
    }
    if stats.is_empty() {
        return Ok(Vec::new());
    }
    let mut scored = Vec::with_capacity(stats.len());
    for (&k, s) in stats {
        if k >= ds.len() {
            return Err(Error::contract(format!("key {k} outside datastore of {}", ds.len())));
        }
        let v = ds.value(k);
        let freq = value_freqs.get(&v).copied().unwrap_or(0);
        if freq == 0 {
            return Err(Error::contract(format!("value {v} has no corpus frequency")));
        }
        scored.push((s.count() as f64 / freq as f64, k));
    }
    let keep = retained_count(stats.len(), r);
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = scored[..keep].iter().map(|&(_, k)| k).collect();
    kept.sort_unstable();
    Ok(kept)
}

/// max(1, round-half-up(r/100 · n)), capped at n.
pub fn retained_count(n: usize, r: f64) -> usize {
    ((r / 100.0 * n as f64 + 0.5).floor() as usize).clamp(1, n.max(1)).min(n)
}

/// One reviser training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    /// Upstream key k.
    pub key: Vector,
    /// Downstream key k'.
    pub key_down: Vector,
    pub value: u32,
    pub emb: Vector,
    pub emb_down: Vector,
    /// Mean of the upstream representations at the querying positions.
    pub avg_query: Vector,
    pub count: u32,
}

/// Inputs for [`build_training_set`].
pub struct PairSources<'a> {
    pub upstream_model: &'a ToyModel,
    pub upstream_ds: &'a Datastore,
    pub downstream_model: &'a ToyModel,
    pub downstream_ds: &'a Datastore,
    pub corpus: &'a Corpus,
}

pub fn build_training_set(
    retained: &[usize],
    stats: &CollectedStats,
    src: &PairSources<'_>,
) -> Result<Vec<TrainingRecord>> {
    src.upstream_ds.check_same_grid(src.downstream_ds)?;
    ensure_dim(src.upstream_ds.dim(), src.upstream_model.dims().repr_dim)?;
    ensure_dim(src.downstream_ds.dim(), src.downstream_model.dims().repr_dim)?;
    src.upstream_model.check_corpus(src.corpus)?;
    let dim = src.upstream_ds.dim();

    retained
        .par_iter()
        .map(|&i| {
            let s = stats
                .get(&i)
                .ok_or_else(|| Error::contract(format!("key {i} was never retrieved")))?;
            if i >= src.upstream_ds.len() {
                return Err(Error::contract(format!("key {i} outside datastore")));
            }
            let up = &src.upstream_ds.entries()[i];
            let down = &src.downstream_ds.entries()[i];
            if up.value != down.value {
                return Err(Error::Corruption(format!("entry {i}: value {} vs {}", up.value, down.value)));
            }
            let mut sum = vec![0.0f64; dim];
            for &p in &s.positions {
                let (x, prefix, _) = src.corpus.context(p)?;
                let q = src.upstream_model.representation(x, prefix)?;
                for (a, &b) in sum.iter_mut().zip(&q.0) {
                    *a += b as f64;
                }
            }
            let n = s.positions.len() as f64;
            Ok(TrainingRecord {
                key: up.key.clone(),
                key_down: down.key.clone(),
                value: up.value,
                emb: src.upstream_model.embed_value(up.value)?,
                emb_down: src.downstream_model.embed_value(up.value)?,
                avg_query: Vector(sum.into_iter().map(|a| (a / n) as f32).collect()),
                count: s.positions.len() as u32,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    repr_dim: usize,
    emb_dim: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    key: String,
    key_down: String,
    value: u32,
    emb: String,
    emb_down: String,
    avg_query: String,
    count: u32,
}

fn encode(v: &Vector) -> String {
    let bytes: Vec<u8> = v.0.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode(s: &str, dim: usize, line: usize) -> Result<Vector> {
    let bytes = B64.decode(s).map_err(|e| Error::Corruption(format!("record line {line}: {e}")))?;
    if bytes.len() != dim * 4 {
        return Err(Error::InconsistentDims(format!(
            "record line {line}: vector has {} bytes, expected {}",
            bytes.len(),
            dim * 4
        )));
    }
    Ok(Vector(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()))
}

/// JSON-lines: a header `{"repr_dim", "emb_dim", "count"}` followed by one
/// record per line with base64 little-endian `f32` vectors.
pub fn save_records(records: &[TrainingRecord], path: &Path) -> Result<()> {
    let (repr_dim, emb_dim) = records.first().map(|r| (r.key.dim(), r.emb.dim())).unwrap_or((0, 0));
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &RecordHeader { repr_dim, emb_dim, count: records.len() })?;
    out.write_all(b"\n")?;
    for r in records {
        let line = RecordLine {
            key: encode(&r.key),
            key_down: encode(&r.key_down),
            value: r.value,
            emb: encode(&r.emb),
            emb_down: encode(&r.emb_down),
            avg_query: encode(&r.avg_query),
            count: r.count,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    crate::binio::write_file(path, &out)
}

pub fn load_records(path: &Path) -> Result<Vec<TrainingRecord>> {
    let f = std::fs::File::open(path).map_err(|source| Error::File { path: path.to_owned(), source })?;
    let mut lines = BufReader::new(f).lines();
    let header: RecordHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => return Err(Error::Truncated("record file has no header".into())),
    };
    let mut records = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: RecordLine = serde_json::from_str(&line)?;
        let n = i + 2;
        records.push(TrainingRecord {
            key: decode(&l.key, header.repr_dim, n)?,
            key_down: decode(&l.key_down, header.repr_dim, n)?,
            value: l.value,
            emb: decode(&l.emb, header.emb_dim, n)?,
            emb_down: decode(&l.emb_down, header.emb_dim, n)?,
            avg_query: decode(&l.avg_query, header.repr_dim, n)?,
            count: l.count,
        });
    }
    if records.len() != header.count {
        return Err(Error::Truncated(format!("header promises {} records, found {}", header.count, records.len())));
    }
    Ok(records)
}
