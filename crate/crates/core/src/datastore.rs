//! Key-value datastore: build by teacher-forced traversal, exact search, and
//! the `KNND` binary format.

use std::path::Path;

use rayon::prelude::*;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{ensure_dim, Error, Result};
use crate::toymodel::{Corpus, Position, ToyModel};
use crate::vecmath::{l2_distance, Vector};

const MAGIC: &[u8; 4] = b"KNND";
const VERSION: u32 = 1;
const FLAG_REVISED: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatastoreEntry {
    pub key: Vector,
    pub value: u32,
    pub sent_id: u32,
    pub timestep: u32,
}

impl DatastoreEntry {
    pub fn position(&self) -> Position {
        Position { sent_id: self.sent_id, timestep: self.timestep }
    }
}

/// An ordered, immutable collection of key-value pairs.
///
/// Entries follow corpus traversal order (sentence major, timestep minor), so
/// two stores built over the same corpus share their index space.
#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    entries: Vec<DatastoreEntry>,
    domain: String,
    fingerprint: [u8; 32],
    revised_by: Option<[u8; 32]>,
}

/// One search hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// Nearest-neighbour search over a set of keys.
///
/// Results come back ascending by distance with ties broken by lower index.
pub trait KnnIndex: Sync {
    fn dim(&self) -> usize;

    fn search(&self, query: &Vector, n_k: usize) -> Result<Vec<Neighbor>>;

    /// Searches many queries; results are returned in request order.
    fn search_batch(&self, queries: &[Vector], n_k: usize) -> Result<Vec<Vec<Neighbor>>> {
        queries.par_iter().map(|q| self.search(q, n_k)).collect()
    }
}

impl Datastore {
    pub fn new(dim: usize, domain: impl Into<String>, fingerprint: [u8; 32]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("datastore dimension must be positive"));
        }
        Ok(Datastore { dim, entries: Vec::new(), domain: domain.into(), fingerprint, revised_by: None })
    }

    pub(crate) fn from_parts(
        dim: usize,
        entries: Vec<DatastoreEntry>,
        domain: String,
        fingerprint: [u8; 32],
        revised_by: Option<[u8; 32]>,
    ) -> Result<Self> {
        let mut ds = Datastore::new(dim, domain, fingerprint)?;
        ds.revised_by = revised_by;
        for e in entries {
            ds.push(e)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, entry: DatastoreEntry) -> Result<()> {
        ensure_dim(self.dim, entry.key.dim())?;
        if let Some(last) = self.entries.last() {
            if last.position() >= entry.position() {
                return Err(Error::contract(format!(
                    "entry {:?} out of traversal order after {:?}",
                    entry.position(),
                    last.position()
                )));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DatastoreEntry] {
        &self.entries
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    /// Fingerprint of the model that produced the keys.
    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    /// Fingerprint of the reviser, when this store holds revised keys.
    pub fn revised_by(&self) -> Option<[u8; 32]> {
        self.revised_by
    }

    pub fn is_revised(&self) -> bool {
        self.revised_by.is_some()
    }

    pub fn value(&self, index: usize) -> u32 {
        self.entries[index].value
    }

    /// Verifies that `model` produced this store's keys.
    pub fn check_model(&self, model: &ToyModel) -> Result<()> {
        let fp = model.fingerprint();
        if fp != self.fingerprint {
            return Err(Error::FingerprintMismatch(format!(
                "datastore was built by model {} but got model {}",
                hex::encode(&self.fingerprint[..8]),
                hex::encode(&fp[..8])
            )));
        }
        Ok(())
    }

    /// Checks that `other` covers the same (sent_id, timestep) grid and values.
    pub fn check_same_grid(&self, other: &Datastore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Corruption(format!(
                "datastores differ in size: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (i, (a, b)) in self.entries.iter().zip(&other.entries).enumerate() {
            if a.position() != b.position() {
                return Err(Error::Corruption(format!(
                    "entry {i}: position {:?} vs {:?}",
                    a.position(),
                    b.position()
                )));
            }
            if a.value != b.value {
                return Err(Error::Corruption(format!("entry {i}: value {} vs {}", a.value, b.value)));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(Vec::with_capacity(64 + self.len() * (self.dim * 4 + 12)));
        // Writes into a Vec are infallible.
        w.bytes(MAGIC).unwrap();
        w.u32(VERSION).unwrap();
        w.u32(self.dim as u32).unwrap();
        w.u64(self.len() as u64).unwrap();
        w.u32(self.domain.len() as u32).unwrap();
        w.bytes(self.domain.as_bytes()).unwrap();
        w.bytes(&self.fingerprint).unwrap();
        match &self.revised_by {
            Some(fp) => {
                w.u8(FLAG_REVISED).unwrap();
                w.bytes(fp).unwrap();
            }
            None => w.u8(0).unwrap(),
        }
        for e in &self.entries {
            w.f32s(&e.key.0).unwrap();
            w.u32(e.value).unwrap();
            w.u32(e.sent_id).unwrap();
            w.u32(e.timestep).unwrap();
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "datastore");
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let tag_len = r.u32()? as usize;
        let domain = String::from_utf8(r.take(tag_len)?.to_vec())
            .map_err(|_| Error::Corruption("domain tag is not UTF-8".into()))?;
        let fingerprint: [u8; 32] = r.take(32)?.try_into().unwrap();
        let revised_by = match r.u8()? {
            0 => None,
            FLAG_REVISED => Some(r.take(32)?.try_into().unwrap()),
            f => return Err(Error::Corruption(format!("unknown datastore flags {f:#x}"))),
        };
        if dim == 0 {
            return Err(Error::InconsistentDims("header dimension is 0".into()));
        }

        let per_entry = dim * 4 + 12;
        let expected = count.checked_mul(per_entry).ok_or_else(|| Error::Corruption("entry count overflow".into()))?;
        let remaining = r.remaining();
        if remaining != expected {
            // A payload that splits evenly into `count` entries of another width
            // was written with a different dimension; anything else is a cut file.
            let other_width = count > 0 && remaining % count == 0 && {
                let each = remaining / count;
                each > 12 && (each - 12) % 4 == 0
            };
            if other_width || remaining > expected {
                return Err(Error::InconsistentDims(format!(
                    "header says {count} entries of dim {dim} ({expected} bytes) but payload is {remaining} bytes"
                )));
            }
            return Err(Error::Truncated(format!("datastore payload is {remaining} of {expected} bytes")));
        }

        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let key = Vector(r.f32s(dim)?);
            if !key.is_finite() {
                return Err(Error::Corruption("non-finite key".into()));
            }
            entries.push(DatastoreEntry { key, value: r.u32()?, sent_id: r.u32()?, timestep: r.u32()? });
        }
        Datastore::from_parts(dim, entries, domain, fingerprint, revised_by)
            .map_err(|e| Error::Corruption(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

impl KnnIndex for Datastore {
    fn dim(&self) -> usize {
        self.dim
    }

    /// Exhaustive exact search.
    fn search(&self, query: &Vector, n_k: usize) -> Result<Vec<Neighbor>> {
        ensure_dim(self.dim, query.dim())?;
        if n_k == 0 {
            return Err(Error::contract("n_k must be at least 1"));
        }
        let k = n_k.min(self.len());
        // Sorted ascending by (distance, index); k is small so insertion is cheap.
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        for (index, e) in self.entries.iter().enumerate() {
            let distance = l2_distance(&query.0, &e.key.0)?;
            if best.len() == k {
                let worst = best[k - 1];
                // Later indices lose ties, so only strictly closer entries get in.
                if distance >= worst.distance {
                    continue;
                }
            }
            let at = best.partition_point(|n| n.distance <= distance);
            best.insert(at, Neighbor { index, distance });
            best.truncate(k);
        }
        Ok(best)
    }
}

/// Traverses `corpus` with `model` under teacher forcing, one entry per target
/// position (EOS included).
pub fn build(model: &ToyModel, corpus: &Corpus) -> Result<Datastore> {
    model.check_corpus(corpus)?;
    let per_sentence: Vec<Vec<DatastoreEntry>> = corpus
        .pairs
        .par_iter()
        .enumerate()
        .map(|(s, pair)| {
            (0..pair.tgt.len())
                .map(|t| {
                    Ok(DatastoreEntry {
                        key: model.representation(&pair.src, &pair.tgt[..t])?,
                        value: pair.tgt[t],
                        sent_id: s as u32,
                        timestep: t as u32,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut ds = Datastore::new(model.dims().repr_dim, corpus.domain.clone(), model.fingerprint())?;
    for e in per_sentence.into_iter().flatten() {
        ds.push(e)?;
    }
    Ok(ds)
}
