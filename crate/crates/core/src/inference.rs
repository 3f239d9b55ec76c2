//! kNN distribution, interpolation with the model distribution, and greedy
//! retrieval-augmented decoding.

use serde::{Deserialize, Serialize};

use crate::datastore::{Datastore, KnnIndex};
use crate::error::{ensure_dim, Error, Result};
use crate::toymodel::{ToyModel, EOS};
use crate::vecmath::temperature_softmax;

/// Probability vector over the target vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates entries in [0, 1] summing to 1 ± 1e-6.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::contract("empty distribution"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract("probability outside [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("probabilities sum to {total}")));
        }
        Ok(Distribution { probs })
    }

    pub(crate) fn from_probs_unchecked(probs: Vec<f64>) -> Self {
        Distribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most probable token; the lowest id wins ties.
    pub fn argmax(&self) -> u32 {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as u32
    }
}

/// Greedy decoding settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Interpolation weight λ on the kNN distribution.
    pub lambda: f64,
    /// Softmax temperature T.
    pub temperature: f64,
    /// Neighbours retrieved per step.
    pub n_k: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { lambda: 0.5, temperature: 10.0, n_k: 8, max_len: 32 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::contract(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::contract(format!("temperature {} must be positive", self.temperature)));
        }
        if self.n_k == 0 {
            return Err(Error::contract("n_k must be at least 1"));
        }
        Ok(())
    }
}

/// Softmax of −d/T over the retrieved neighbours, summed per value.
pub fn knn_distribution(retrieved: &[(u32, f64)], temperature: f64, vocab_size: usize) -> Result<Distribution> {
    if retrieved.is_empty() {
        return Err(Error::contract("no retrieved neighbours"));
    }
    if let Some(&(v, _)) = retrieved.iter().find(|(v, _)| *v as usize >= vocab_size) {
        return Err(Error::contract(format!("value {v} outside vocabulary of {vocab_size}")));
    }
    let distances: Vec<f64> = retrieved.iter().map(|&(_, d)| d).collect();
    let weights = temperature_softmax(&distances, temperature)?;
    let mut probs = vec![0.0; vocab_size];
    for (&(v, _), w) in retrieved.iter().zip(weights) {
        probs[v as usize] += w;
    }
    Ok(Distribution { probs })
}

/// λ·p_knn + (1 − λ)·p_nmt. The endpoints return the respective input exactly.
pub fn interpolate(p_knn: &Distribution, p_nmt: &Distribution, lambda: f64) -> Result<Distribution> {
    ensure_dim(p_nmt.len(), p_knn.len())?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("lambda {lambda} outside [0, 1]")));
    }
    if lambda == 0.0 {
        return Ok(p_nmt.clone());
    }
    if lambda == 1.0 {
        return Ok(p_knn.clone());
    }
    let probs = p_knn.probs.iter().zip(&p_nmt.probs).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
    Ok(Distribution { probs })
}

/// Greedy kNN-MT decoding; the returned sequence excludes EOS.
pub fn translate(model: &ToyModel, ds: &Datastore, src: &[u32], cfg: &DecodeConfig) -> Result<Vec<u32>> {
    cfg.validate()?;
    ensure_dim(ds.dim(), model.dims().repr_dim)?;
    if src.is_empty() {
        return Err(Error::contract("empty source sentence"));
    }
    let vocab = model.dims().tgt_vocab;
    let mut out = Vec::new();
    while out.len() < cfg.max_len {
        let step = model.forward(src, &out)?;
        let next = if cfg.lambda == 0.0 {
            step.p_nmt.argmax()
        } else {
            let hits = ds.search(&step.repr, cfg.n_k)?;
            let retrieved: Vec<(u32, f64)> = hits.iter().map(|n| (ds.entries()[n.index].value, n.distance)).collect();
            let p_knn = knn_distribution(&retrieved, cfg.temperature, vocab)?;
            interpolate(&p_knn, &step.p_nmt, cfg.lambda)?.argmax()
        };
        if next == EOS {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

/// Decoding with the model alone (no retrieval).
pub fn greedy_decode(model: &ToyModel, src: &[u32], max_len: usize) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    while out.len() < max_len {
        let next = model.forward(src, &out)?.p_nmt.argmax();
        if next == EOS {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn knn_examples() {
        let p = knn_distribution(&[(7, 3.2)], 10.0, 12).unwrap();
        assert_eq!(p.probs()[7], 1.0);
        assert_eq!(p.probs().iter().sum::<f64>(), 1.0);

        let p = knn_distribution(&[(2, 1.5), (5, 1.5)], 10.0, 6).unwrap();
        assert_eq!(p.probs()[2], 0.5);
        assert_eq!(p.probs()[5], 0.5);

        let t = 10.0;
        let p = knn_distribution(&[(1, 0.0), (4, t * std::f64::consts::LN_2)], t, 5).unwrap();
        assert!((p.probs()[1] - 2.0 / 3.0).abs() < 1e-6);
        assert!((p.probs()[4] - 1.0 / 3.0).abs() < 1e-6);

        // Same value twice sums.
        let p = knn_distribution(&[(3, 1.0), (3, 2.0), (0, 50.0)], 1.0, 4).unwrap();
        assert!(p.probs()[3] > 0.99);

        assert!(knn_distribution(&[], 1.0, 4).is_err());
        assert!(knn_distribution(&[(9, 0.0)], 1.0, 4).is_err());
    }

    #[test]
    fn interpolate_examples() {
        let a = Distribution::new(vec![1.0, 0.0]).unwrap();
        let b = Distribution::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), b);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 0.5).unwrap().probs(), &[0.5, 0.5]);
        let c = Distribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(interpolate(&a, &c, 0.5), Err(Error::DimMismatch { .. })));
        assert!(interpolate(&a, &b, 1.5).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_id() {
        let d = Distribution::new(vec![0.25, 0.375, 0.375]).unwrap();
        assert_eq!(d.argmax(), 1);
    }

    fn dist(n: usize) -> impl Strategy<Value = Distribution> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter("non-zero", |v| v.iter().sum::<f64>() > 1e-3).prop_map(|v| {
            let s: f64 = v.iter().sum();
            Distribution::from_probs_unchecked(v.into_iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn knn_shift_invariance(
            hits in prop::collection::vec((0u32..16, 0u32..200), 1..10),
            c in 0u32..1000,
            t in prop::sample::select(vec![0.5f64, 1.0, 2.0, 4.0, 16.0]),
        ) {
            // Integer distances keep d + c and the max-shift exact in f64.
            let base: Vec<(u32, f64)> = hits.iter().map(|&(v, d)| (v, d as f64)).collect();
            let shifted: Vec<(u32, f64)> = hits.iter().map(|&(v, d)| (v, (d + c) as f64)).collect();
            prop_assert_eq!(knn_distribution(&base, t, 16).unwrap(), knn_distribution(&shifted, t, 16).unwrap());
        }

        #[test]
        fn interpolate_stays_normalized((a, b) in (1usize..20).prop_flat_map(|n| (dist(n), dist(n))), lambda in 0.0f64..=1.0) {
            let p = interpolate(&a, &b, lambda).unwrap();
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() <= 2e-6);
            prop_assert!(p.probs().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
