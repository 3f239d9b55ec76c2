//! Key-representation reviser.
//!
//! A two-layer ReLU network maps `[k; k'; Emb(v); Emb'(v)]` to a correction
//! `Δk`, and the revised key is `k + Δk`. Training minimizes, per record,
//! `d(k + Δk, avg_q) + α·‖Δk‖²` where `avg_q` is the mean upstream query that
//! retrieved the key's downstream counterpart.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::datastore::{Datastore, DatastoreEntry};
use crate::error::{ensure_dim, Error, Result};
use crate::pairbuilder::TrainingRecord;
use crate::toymodel::ToyModel;
use crate::vecmath::{adam_step, AdamState, Matrix, Vector};

const MAGIC: &[u8; 4] = b"RVSR";
const VERSION: u32 = 1;

/// Distance used for the semantic-distance term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    /// ‖·‖², smooth everywhere.
    #[default]
    Squared,
    /// ‖·‖, with subgradient 0 at the origin.
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviserDims {
    /// Key width D.
    pub repr_dim: usize,
    /// Token embedding width E.
    pub emb_dim: usize,
    /// Hidden width H.
    pub hidden: usize,
}

impl ReviserDims {
    pub fn input_dim(&self) -> usize {
        2 * self.repr_dim + 2 * self.emb_dim
    }

    /// H = 4·(2D + 2E).
    pub fn with_default_hidden(repr_dim: usize, emb_dim: usize) -> Self {
        ReviserDims { repr_dim, emb_dim, hidden: 4 * (2 * repr_dim + 2 * emb_dim) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReviserParams {
    dims: ReviserDims,
    w1: Matrix,
    b1: Vec<f32>,
    w2: Matrix,
    b2: Vec<f32>,
}

/// Gradient of the mean batch loss, laid out like [`ReviserParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReviserGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ReviserGrads {
    fn zeros(d: ReviserDims) -> Self {
        ReviserGrads {
            w1: vec![0.0; d.hidden * d.input_dim()],
            b1: vec![0.0; d.hidden],
            w2: vec![0.0; d.repr_dim * d.hidden],
            b2: vec![0.0; d.repr_dim],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

struct Pass {
    input: Vec<f64>,
    pre: Vec<f64>,
    delta: Vec<f64>,
}

impl ReviserParams {
    pub fn zeros(dims: ReviserDims) -> Self {
        ReviserParams {
            dims,
            w1: Matrix::zeros(dims.hidden, dims.input_dim()),
            b1: vec![0.0; dims.hidden],
            w2: Matrix::zeros(dims.repr_dim, dims.hidden),
            b2: vec![0.0; dims.repr_dim],
        }
    }

    /// Weights uniform in ±1/√fan_in, biases zero.
    pub fn init(dims: ReviserDims, seed: u64) -> Result<Self> {
        if dims.repr_dim == 0 || dims.emb_dim == 0 || dims.hidden == 0 {
            return Err(Error::contract(format!("invalid reviser dimensions {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ReviserParams::zeros(dims);
        let b1 = 1.0 / (dims.input_dim() as f32).sqrt();
        p.w1.as_mut_slice().iter_mut().for_each(|w| *w = rng.random_range(-b1..=b1));
        let b2 = 1.0 / (dims.hidden as f32).sqrt();
        p.w2.as_mut_slice().iter_mut().for_each(|w| *w = rng.random_range(-b2..=b2));
        Ok(p)
    }

    /// Builds parameters from raw row-major blocks.
    pub fn from_blocks(dims: ReviserDims, w1: Vec<f32>, b1: Vec<f32>, w2: Vec<f32>, b2: Vec<f32>) -> Result<Self> {
        ensure_dim(dims.hidden, b1.len())?;
        ensure_dim(dims.repr_dim, b2.len())?;
        Ok(ReviserParams {
            w1: Matrix::from_vec(dims.hidden, dims.input_dim(), w1)?,
            b1,
            w2: Matrix::from_vec(dims.repr_dim, dims.hidden, w2)?,
            b2,
            dims,
        })
    }

    pub fn dims(&self) -> ReviserDims {
        self.dims
    }

    pub fn tensors(&self) -> [&[f32]; 4] {
        [self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut [f32]; 4] {
        [self.w1.as_mut_slice(), &mut self.b1, self.w2.as_mut_slice(), &mut self.b2]
    }

    fn check_inputs(&self, k: &[f32], k_down: &[f32], emb: &[f32], emb_down: &[f32]) -> Result<()> {
        ensure_dim(self.dims.repr_dim, k.len())?;
        ensure_dim(self.dims.repr_dim, k_down.len())?;
        ensure_dim(self.dims.emb_dim, emb.len())?;
        ensure_dim(self.dims.emb_dim, emb_down.len())
    }

    fn pass(&self, k: &[f32], k_down: &[f32], emb: &[f32], emb_down: &[f32]) -> Pass {
        let input: Vec<f64> = k.iter().chain(k_down).chain(emb).chain(emb_down).map(|&x| x as f64).collect();
        let pre: Vec<f64> = (0..self.dims.hidden)
            .map(|h| {
                self.w1.row(h).iter().zip(&input).map(|(&w, &x)| w as f64 * x).sum::<f64>() + self.b1[h] as f64
            })
            .collect();
        let delta = (0..self.dims.repr_dim)
            .map(|d| {
                self.w2.row(d).iter().zip(&pre).map(|(&w, &p)| w as f64 * p.max(0.0)).sum::<f64>()
                    + self.b2[d] as f64
            })
            .collect();
        Pass { input, pre, delta }
    }

    /// Δk = W2·ReLU(W1·[k; k'; emb; emb'] + b1) + b2.
    pub fn forward(&self, k: &Vector, k_down: &Vector, emb: &Vector, emb_down: &Vector) -> Result<Vector> {
        self.check_inputs(&k.0, &k_down.0, &emb.0, &emb_down.0)?;
        let p = self.pass(&k.0, &k_down.0, &emb.0, &emb_down.0);
        Ok(Vector(p.delta.into_iter().map(|x| x as f32).collect()))
    }

    fn record_pass(&self, r: &TrainingRecord) -> Result<Pass> {
        self.check_inputs(&r.key.0, &r.key_down.0, &r.emb.0, &r.emb_down.0)?;
        ensure_dim(self.dims.repr_dim, r.avg_query.dim())?;
        Ok(self.pass(&r.key.0, &r.key_down.0, &r.emb.0, &r.emb_down.0))
    }

    pub fn to_bytes(&self, config: &ReviserTrainConfig) -> Result<Vec<u8>> {
        let mut w = Writer::new(Vec::new());
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.u32(self.dims.repr_dim as u32)?;
        w.u32(self.dims.emb_dim as u32)?;
        w.u32(self.dims.hidden as u32)?;
        for t in self.tensors() {
            w.f32s(t)?;
        }
        let trailer = serde_json::to_vec(config)?;
        w.u32(trailer.len() as u32)?;
        w.bytes(&trailer)?;
        Ok(w.into_inner())
    }

    /// Parses a reviser file, returning the parameters and the echoed config.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, ReviserTrainConfig)> {
        let mut r = Reader::new(bytes, "reviser");
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let dims = ReviserDims { repr_dim: r.u32()? as usize, emb_dim: r.u32()? as usize, hidden: r.u32()? as usize };
        if dims.repr_dim == 0 || dims.emb_dim == 0 || dims.hidden == 0 {
            return Err(Error::InconsistentDims(format!("reviser header {dims:?}")));
        }
        let w1 = r.f32s(dims.hidden * dims.input_dim())?;
        let b1 = r.f32s(dims.hidden)?;
        let w2 = r.f32s(dims.repr_dim * dims.hidden)?;
        let b2 = r.f32s(dims.repr_dim)?;
        let len = r.u32()? as usize;
        let config: ReviserTrainConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::InconsistentDims(format!("reviser trailer does not parse: {e}")))?;
        if r.remaining() != 0 {
            return Err(Error::InconsistentDims(format!("{} trailing bytes after reviser trailer", r.remaining())));
        }
        let params = ReviserParams::from_blocks(dims, w1, b1, w2, b2)?;
        if params.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(Error::Corruption("non-finite reviser parameter".into()));
        }
        Ok((params, config))
    }

    pub fn save(&self, config: &ReviserTrainConfig, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes(config)?)
    }

    pub fn load(path: &Path) -> Result<(Self, ReviserTrainConfig)> {
        Self::from_bytes(&read_file(path)?)
    }

    /// SHA-256 over the parameter blocks only.
    pub fn fingerprint(&self) -> [u8; 32] {
        let bytes: Vec<u8> = self.tensors().iter().flat_map(|t| t.iter().flat_map(|x| x.to_le_bytes())).collect();
        crate::seed::fingerprint(&bytes)
    }
}

fn distance_term(residual: &[f64], mode: DistanceMode) -> f64 {
    let sq: f64 = residual.iter().map(|r| r * r).sum();
    match mode {
        DistanceMode::Squared => sq,
        DistanceMode::Euclidean => sq.sqrt(),
    }
}

/// Loss of one record: d(k + Δk, avg_q) + α·‖Δk‖².
pub fn loss(params: &ReviserParams, record: &TrainingRecord, alpha: f64, mode: DistanceMode) -> Result<f64> {
    let p = params.record_pass(record)?;
    let residual: Vec<f64> = (0..params.dims.repr_dim)
        .map(|d| record.key[d] as f64 + p.delta[d] - record.avg_query[d] as f64)
        .collect();
    let reg: f64 = p.delta.iter().map(|x| x * x).sum();
    Ok(distance_term(&residual, mode) + alpha * reg)
}

/// Gradient of the mean loss over `batch`; ReLU′(0) = 0.
pub fn gradients(params: &ReviserParams, batch: &[TrainingRecord], alpha: f64, mode: DistanceMode) -> Result<ReviserGrads> {
    let (g, _) = gradients_and_loss(params, batch, alpha, mode)?;
    Ok(g)
}

fn gradients_and_loss(
    params: &ReviserParams,
    batch: &[TrainingRecord],
    alpha: f64,
    mode: DistanceMode,
) -> Result<(ReviserGrads, f64)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let dims = params.dims;
    let mut g = ReviserGrads::zeros(dims);
    let mut total = 0.0;
    let mut d_delta = vec![0.0f64; dims.repr_dim];
    let mut d_pre = vec![0.0f64; dims.hidden];
    for r in batch {
        let p = params.record_pass(r)?;
        let residual: Vec<f64> =
            (0..dims.repr_dim).map(|d| r.key[d] as f64 + p.delta[d] - r.avg_query[d] as f64).collect();
        let dist = distance_term(&residual, mode);
        total += dist + alpha * p.delta.iter().map(|x| x * x).sum::<f64>();

        let scale = match mode {
            DistanceMode::Squared => 2.0,
            DistanceMode::Euclidean if dist > 0.0 => 1.0 / dist,
            DistanceMode::Euclidean => 0.0,
        };
        for d in 0..dims.repr_dim {
            d_delta[d] = scale * residual[d] + 2.0 * alpha * p.delta[d];
        }

        d_pre.iter_mut().for_each(|x| *x = 0.0);
        for d in 0..dims.repr_dim {
            let gd = d_delta[d];
            g.b2[d] += gd;
            let row = &mut g.w2[d * dims.hidden..(d + 1) * dims.hidden];
            for (h, gw) in row.iter_mut().enumerate() {
                let a = p.pre[h].max(0.0);
                *gw += gd * a;
            }
            for (h, &w) in params.w2.row(d).iter().enumerate() {
                d_pre[h] += gd * w as f64;
            }
        }
        for h in 0..dims.hidden {
            if p.pre[h] <= 0.0 {
                continue;
            }
            let dp = d_pre[h];
            g.b1[h] += dp;
            let row = &mut g.w1[h * dims.input_dim()..(h + 1) * dims.input_dim()];
            for (gw, &x) in row.iter_mut().zip(&p.input) {
                *gw += dp * x;
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for t in g.tensors_mut() {
        t.iter_mut().for_each(|x| *x *= inv);
    }
    Ok((g, total * inv))
}

/// Reviser training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviserTrainConfig {
    /// Weight α of the ‖Δk‖² term.
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub distance: DistanceMode,
    /// Hidden width; `None` picks 4·(2D + 2E).
    pub hidden: Option<usize>,
}

impl Default for ReviserTrainConfig {
    fn default() -> Self {
        ReviserTrainConfig {
            alpha: 0.4,
            lr: 5e-5,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            distance: DistanceMode::Squared,
            hidden: None,
        }
    }
}

impl ReviserTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::contract(format!("alpha {} must be non-negative", self.alpha)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::contract(format!("learning rate {} must be positive", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch size must be at least 1"));
        }
        if self.hidden == Some(0) {
            return Err(Error::contract("hidden size must be positive"));
        }
        Ok(())
    }
}

/// Trained parameters plus the per-epoch mean loss.
#[derive(Debug, Clone)]
pub struct ReviserTraining {
    pub params: ReviserParams,
    pub epoch_losses: Vec<f64>,
}

/// Adam over shuffled mini-batches.
pub fn train(records: &[TrainingRecord], cfg: &ReviserTrainConfig) -> Result<ReviserTraining> {
    cfg.validate()?;
    let first = records.first().ok_or_else(|| Error::contract("no training records"))?;
    let dims = ReviserDims {
        repr_dim: first.key.dim(),
        emb_dim: first.emb.dim(),
        hidden: cfg.hidden.unwrap_or(4 * (2 * first.key.dim() + 2 * first.emb.dim())),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ReviserParams::init(dims, rng.random())?;
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut adam = AdamState::new(&shapes);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| records[i].clone()));
            let (g, l) = gradients_and_loss(&params, &batch, cfg.alpha, cfg.distance)?;
            weighted += l * chunk.len() as f64;
            let g32: Vec<Vec<f32>> = g.tensors().iter().map(|t| t.iter().map(|&x| x as f32).collect()).collect();
            let refs: Vec<&[f32]> = g32.iter().map(Vec::as_slice).collect();
            adam_step(&mut params.tensors_mut(), &refs, &mut adam, cfg.lr)?;
        }
        let mean = weighted / records.len() as f64;
        log::debug!("reviser epoch {epoch}: mean loss {mean:.6}");
        epoch_losses.push(mean);
    }
    if let (Some(a), Some(b)) = (epoch_losses.first(), epoch_losses.last()) {
        log::info!("reviser trained: loss {a:.5} -> {b:.5} over {} epochs", cfg.epochs);
    }
    Ok(ReviserTraining { params, epoch_losses })
}

/// Mean ‖Δk‖ over `records`.
pub fn mean_delta_norm(params: &ReviserParams, records: &[TrainingRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("no records"));
    }
    let norms: Vec<f64> = records
        .iter()
        .map(|r| params.record_pass(r).map(|p| p.delta.iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect::<Result<_>>()?;
    Ok(norms.iter().sum::<f64>() / norms.len() as f64)
}

/// Rewrites every upstream key as k + Δk. Values, provenance, order and
/// dimension are preserved.
pub fn revise(
    upstream: &Datastore,
    downstream: &Datastore,
    params: &ReviserParams,
    upstream_model: &ToyModel,
    downstream_model: &ToyModel,
) -> Result<Datastore> {
    let dims = params.dims();
    if dims.repr_dim != upstream.dim() || dims.repr_dim != downstream.dim() {
        return Err(Error::InconsistentDims(format!(
            "reviser expects keys of dim {} but the datastores have dim {} and {}",
            dims.repr_dim,
            upstream.dim(),
            downstream.dim()
        )));
    }
    let (e_up, e_down) = (upstream_model.dims().emb_dim, downstream_model.dims().emb_dim);
    if dims.emb_dim != e_up || dims.emb_dim != e_down {
        return Err(Error::InconsistentDims(format!(
            "reviser expects embeddings of dim {} but the models have {e_up} and {e_down}",
            dims.emb_dim
        )));
    }
    upstream.check_same_grid(downstream)?;

    let entries: Vec<DatastoreEntry> = upstream
        .entries()
        .par_iter()
        .zip(downstream.entries())
        .map(|(up, down)| {
            let emb = upstream_model.embed_value(up.value)?;
            let emb_down = downstream_model.embed_value(up.value)?;
            let delta = params.forward(&up.key, &down.key, &emb, &emb_down)?;
            let key = Vector(up.key.0.iter().zip(&delta.0).map(|(k, d)| k + d).collect());
            Ok(DatastoreEntry { key, ..up.clone() })
        })
        .collect::<Result<_>>()?;
    Datastore::from_parts(
        upstream.dim(),
        entries,
        upstream.domain().to_string(),
        upstream.fingerprint(),
        Some(params.fingerprint()),
    )
}
