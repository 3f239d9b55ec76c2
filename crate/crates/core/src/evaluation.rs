//! Retrieval accuracy, token accuracy and TF-IDF domain difference.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{Datastore, KnnIndex};
use crate::error::{ensure_dim, Error, Result};
use crate::inference::knn_distribution;
use crate::toymodel::{Corpus, ToyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub retrieval_accuracy: f64,
    /// Filled in by translation evaluation; `None` for retrieval-only runs.
    pub token_accuracy: Option<f64>,
    pub positions_evaluated: usize,
    pub positions_skipped: usize,
    pub config: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_k: usize,
    pub temperature: f64,
    pub skip: Vec<u32>,
    pub datastore_domain: String,
    pub revised: bool,
}

/// Fraction of teacher-forced positions (gold token not in `skip`) where the
/// argmax of the kNN distribution is the gold token.
pub fn retrieval_accuracy(
    model: &ToyModel,
    ds: &Datastore,
    corpus: &Corpus,
    skip: &HashSet<u32>,
    n_k: usize,
    temperature: f64,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::contract("empty evaluation corpus"));
    }
    model.check_corpus(corpus)?;
    ensure_dim(ds.dim(), model.dims().repr_dim)?;
    let vocab = model.dims().tgt_vocab;

    let per_sentence: Vec<(usize, usize, usize)> = corpus
        .pairs
        .par_iter()
        .map(|pair| {
            let (mut hits, mut evaluated, mut skipped) = (0, 0, 0);
            for t in 0..pair.tgt.len() {
                let gold = pair.tgt[t];
                if skip.contains(&gold) {
                    skipped += 1;
                    continue;
                }
                let q = model.representation(&pair.src, &pair.tgt[..t])?;
                let retrieved: Vec<(u32, f64)> =
                    ds.search(&q, n_k)?.into_iter().map(|n| (ds.value(n.index), n.distance)).collect();
                let p = knn_distribution(&retrieved, temperature, vocab)?;
                hits += (p.argmax() == gold) as usize;
                evaluated += 1;
            }
            Ok((hits, evaluated, skipped))
        })
        .collect::<Result<_>>()?;

    let (hits, evaluated, skipped) =
        per_sentence.iter().fold((0, 0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2));
    if evaluated == 0 {
        return Err(Error::NoPositionsEvaluated);
    }
    let mut skip_list: Vec<u32> = skip.iter().copied().collect();
    skip_list.sort_unstable();
    Ok(EvalReport {
        retrieval_accuracy: hits as f64 / evaluated as f64,
        token_accuracy: None,
        positions_evaluated: evaluated,
        positions_skipped: skipped,
        config: EvalConfig {
            n_k,
            temperature,
            skip: skip_list,
            datastore_domain: ds.domain().to_string(),
            revised: ds.is_revised(),
        },
    })
}

/// Aligned exact matches over Σ max(|hyp|, |ref|); length differences count as misses.
pub fn token_accuracy(hypotheses: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::contract(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hits += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += h.len().max(r.len());
    }
    Ok(if total == 0 { 1.0 } else { hits as f64 / total as f64 })
}

/// 1 − cosine between the two corpora's mean target-side TF-IDF vectors.
///
/// TF is the raw count of a token in a sentence; IDF is smoothed over the
/// sentences of both corpora: `ln((1 + N) / (1 + df)) + 1`.
pub fn domain_difference(a: &Corpus, b: &Corpus) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("domain difference needs two non-empty corpora"));
    }
    let n_docs = (a.len() + b.len()) as f64;
    let mut df: HashMap<u32, usize> = HashMap::new();
    for pair in a.pairs.iter().chain(&b.pairs) {
        let uniq: HashSet<u32> = pair.tgt.iter().copied().collect();
        for t in uniq {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let idf = |t: u32| ((1.0 + n_docs) / (1.0 + df[&t] as f64)).ln() + 1.0;

    let mean_vector = |c: &Corpus| {
        // BTreeMap keeps summation order fixed, so the result is reproducible.
        let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
        for pair in &c.pairs {
            for &t in &pair.tgt {
                *acc.entry(t).or_insert(0.0) += idf(t);
            }
        }
        for v in acc.values_mut() {
            *v /= c.len() as f64;
        }
        acc
    };
    let va = mean_vector(a);
    let vb = mean_vector(b);
    let dot: f64 = va.iter().filter_map(|(t, x)| vb.get(t).map(|y| x * y)).sum();
    let norm = |v: &BTreeMap<u32, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let cos = dot / (norm(&va) * norm(&vb));
    Ok((1.0 - cos).clamp(0.0, 1.0))
}
