//! Fixed-window feedforward translation model.
//!
//! The representation at target step t is
//! `tanh(W_h · [mean(src emb) ; emb(last m tokens of BOS·y<t)] + b_h)`, and the
//! next-token distribution is `softmax(W_o · repr + b_o)`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, BOS, PAD};
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::inference::Distribution;
use crate::vecmath::{adam_step, dot_f64, softmax_logits, AdamState, Matrix, Vector};

const MAGIC: &[u8; 4] = b"TOYM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Token embedding width E.
    pub emb_dim: usize,
    /// Representation (datastore key) width D.
    pub repr_dim: usize,
    /// Number of previous target tokens the model sees.
    pub window: usize,
}

impl ModelDims {
    pub fn new(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelDims { src_vocab, tgt_vocab, emb_dim: 16, repr_dim: 32, window: 3 }
    }

    pub fn input_dim(&self) -> usize {
        (self.window + 1) * self.emb_dim
    }

    fn validate(&self) -> Result<()> {
        if self.src_vocab <= PAD as usize
            || self.tgt_vocab <= PAD as usize
            || self.emb_dim == 0
            || self.repr_dim == 0
            || self.window == 0
        {
            return Err(Error::contract(format!("invalid model dimensions {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    dims: ModelDims,
    src_emb: Matrix,
    tgt_emb: Matrix,
    w_h: Matrix,
    b_h: Vec<f32>,
    w_o: Matrix,
    b_o: Vec<f32>,
}

/// Output of a single forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub repr: Vector,
    pub p_nmt: Distribution,
}

/// Intermediate values kept for backpropagation.
struct Activations {
    input: Vec<f32>,
    window_tokens: Vec<u32>,
    repr: Vec<f32>,
    probs: Vec<f64>,
}

impl ToyModel {
    /// Random initialization: embeddings uniform in [−1, 1], weights uniform in
    /// ±1/√fan_in, biases zero.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        Self::init_with_embedding_scale(dims, seed, 1.0)
    }

    /// As [`ToyModel::init`] with embeddings uniform in ±`scale`.
    pub fn init_with_embedding_scale(dims: ModelDims, seed: u64, scale: f32) -> Result<Self> {
        dims.validate()?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::contract(format!("embedding scale {scale} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, bound: f32| {
            let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
            Matrix::from_vec(rows, cols, data)
        };
        let src_emb = uniform(dims.src_vocab, dims.emb_dim, scale)?;
        let tgt_emb = uniform(dims.tgt_vocab, dims.emb_dim, scale)?;
        let w_h = uniform(dims.repr_dim, dims.input_dim(), 1.0 / (dims.input_dim() as f32).sqrt())?;
        let w_o = uniform(dims.tgt_vocab, dims.repr_dim, 1.0 / (dims.repr_dim as f32).sqrt())?;
        Ok(ToyModel {
            dims,
            src_emb,
            tgt_emb,
            w_h,
            b_h: vec![0.0; dims.repr_dim],
            w_o,
            b_o: vec![0.0; dims.tgt_vocab],
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    fn check_ids(&self, src: &[u32], prefix: &[u32]) -> Result<()> {
        if src.is_empty() {
            return Err(Error::contract("empty source sentence"));
        }
        if let Some(&bad) = src.iter().find(|&&id| id as usize >= self.dims.src_vocab) {
            return Err(Error::contract(format!("source id {bad} outside vocabulary of {}", self.dims.src_vocab)));
        }
        if let Some(&bad) = prefix.iter().find(|&&id| id as usize >= self.dims.tgt_vocab) {
            return Err(Error::contract(format!("target id {bad} outside vocabulary of {}", self.dims.tgt_vocab)));
        }
        Ok(())
    }

    /// Last `window` tokens of BOS·prefix, left-padded with PAD.
    fn window_tokens(&self, prefix: &[u32]) -> Vec<u32> {
        let m = self.dims.window;
        let mut ctx = Vec::with_capacity(m);
        let have = prefix.len() + 1;
        for _ in have..m {
            ctx.push(PAD);
        }
        if have <= m {
            ctx.push(BOS);
            ctx.extend_from_slice(prefix);
        } else {
            ctx.extend_from_slice(&prefix[prefix.len() - m..]);
        }
        ctx
    }

    fn hidden(&self, src: &[u32], prefix: &[u32]) -> (Vec<f32>, Vec<u32>, Vec<f32>) {
        let e = self.dims.emb_dim;
        let mut input = vec![0.0f32; self.dims.input_dim()];
        let mut acc = vec![0.0f64; e];
        for &s in src {
            for (a, &x) in acc.iter_mut().zip(self.src_emb.row(s as usize)) {
                *a += x as f64;
            }
        }
        for (dst, a) in input[..e].iter_mut().zip(&acc) {
            *dst = (a / src.len() as f64) as f32;
        }
        let window = self.window_tokens(prefix);
        for (slot, &tok) in window.iter().enumerate() {
            input[(slot + 1) * e..(slot + 2) * e].copy_from_slice(self.tgt_emb.row(tok as usize));
        }
        let repr = (0..self.dims.repr_dim)
            .map(|j| (dot_f64(self.w_h.row(j), &input) + self.b_h[j] as f64).tanh() as f32)
            .collect();
        (input, window, repr)
    }

    fn activations(&self, src: &[u32], prefix: &[u32]) -> Activations {
        let (input, window_tokens, repr) = self.hidden(src, prefix);
        let mut probs: Vec<f64> =
            (0..self.dims.tgt_vocab).map(|k| dot_f64(self.w_o.row(k), &repr) + self.b_o[k] as f64).collect();
        softmax_logits(&mut probs);
        Activations { input, window_tokens, repr, probs }
    }

    /// Contextual representation f(x, y<t) only; identical to `forward(..).repr`.
    pub fn representation(&self, src: &[u32], prefix: &[u32]) -> Result<Vector> {
        self.check_ids(src, prefix)?;
        Ok(Vector(self.hidden(src, prefix).2))
    }

    pub fn forward(&self, src: &[u32], prefix: &[u32]) -> Result<ModelOutput> {
        self.check_ids(src, prefix)?;
        let act = self.activations(src, prefix);
        Ok(ModelOutput { repr: Vector(act.repr), p_nmt: Distribution::from_probs_unchecked(act.probs) })
    }

    /// Row `v` of the target embedding table.
    pub fn embed_value(&self, v: u32) -> Result<Vector> {
        if v as usize >= self.dims.tgt_vocab {
            return Err(Error::contract(format!("target id {v} outside vocabulary of {}", self.dims.tgt_vocab)));
        }
        Ok(Vector(self.tgt_emb.row(v as usize).to_vec()))
    }

    fn tensors(&self) -> [&[f32]; 6] {
        [
            self.src_emb.as_slice(),
            self.tgt_emb.as_slice(),
            self.w_h.as_slice(),
            &self.b_h,
            self.w_o.as_slice(),
            &self.b_o,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f32]; 6] {
        [
            self.src_emb.as_mut_slice(),
            self.tgt_emb.as_mut_slice(),
            self.w_h.as_mut_slice(),
            &mut self.b_h,
            self.w_o.as_mut_slice(),
            &mut self.b_o,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(Vec::new());
        let d = &self.dims;
        // Writing into a Vec cannot fail.
        w.bytes(MAGIC).unwrap();
        w.u32(VERSION).unwrap();
        for x in [d.src_vocab, d.tgt_vocab, d.emb_dim, d.repr_dim, d.window] {
            w.u32(x as u32).unwrap();
        }
        for t in self.tensors() {
            w.f32s(t).unwrap();
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "model");
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let mut next = || r.u32().map(|x| x as usize);
        let dims = ModelDims {
            src_vocab: next()?,
            tgt_vocab: next()?,
            emb_dim: next()?,
            repr_dim: next()?,
            window: next()?,
        };
        dims.validate().map_err(|_| Error::InconsistentDims(format!("model header {dims:?}")))?;
        let sizes = [
            dims.src_vocab * dims.emb_dim,
            dims.tgt_vocab * dims.emb_dim,
            dims.repr_dim * dims.input_dim(),
            dims.repr_dim,
            dims.tgt_vocab * dims.repr_dim,
            dims.tgt_vocab,
        ];
        let expected: usize = sizes.iter().sum::<usize>() * 4;
        if r.remaining() > expected {
            return Err(Error::InconsistentDims(format!(
                "model payload is {} bytes but the header implies {expected}",
                r.remaining()
            )));
        }
        let mut blocks = Vec::with_capacity(6);
        for n in sizes {
            blocks.push(r.f32s(n)?);
        }
        let mut it = blocks.into_iter();
        let mut next_block = || it.next().unwrap();
        let model = ToyModel {
            src_emb: Matrix::from_vec(dims.src_vocab, dims.emb_dim, next_block())?,
            tgt_emb: Matrix::from_vec(dims.tgt_vocab, dims.emb_dim, next_block())?,
            w_h: Matrix::from_vec(dims.repr_dim, dims.input_dim(), next_block())?,
            b_h: next_block(),
            w_o: Matrix::from_vec(dims.tgt_vocab, dims.repr_dim, next_block())?,
            b_o: next_block(),
            dims,
        };
        if !model.is_finite() {
            return Err(Error::Corruption("non-finite model parameter".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// SHA-256 of the serialized model.
    pub fn fingerprint(&self) -> [u8; 32] {
        crate::seed::fingerprint(&self.to_bytes())
    }

    /// Mean teacher-forced cross-entropy over every target position.
    pub fn mean_cross_entropy(&self, corpus: &Corpus) -> Result<f64> {
        self.check_corpus(corpus)?;
        let (mut total, mut n) = (0.0, 0usize);
        for pair in &corpus.pairs {
            for t in 0..pair.tgt.len() {
                let act = self.activations(&pair.src, &pair.tgt[..t]);
                total -= act.probs[pair.tgt[t] as usize].max(f64::MIN_POSITIVE).ln();
                n += 1;
            }
        }
        Ok(total / n as f64)
    }

    /// Teacher-forced next-token accuracy (argmax, lowest id on ties).
    pub fn next_token_accuracy(&self, corpus: &Corpus) -> Result<f64> {
        self.check_corpus(corpus)?;
        let (mut hits, mut n) = (0usize, 0usize);
        for pair in &corpus.pairs {
            for t in 0..pair.tgt.len() {
                let out = self.forward(&pair.src, &pair.tgt[..t])?;
                hits += (out.p_nmt.argmax() == pair.tgt[t]) as usize;
                n += 1;
            }
        }
        Ok(hits as f64 / n as f64)
    }

    pub(crate) fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::contract("empty corpus"));
        }
        corpus.validate(self.dims.src_vocab, self.dims.tgt_vocab)
    }

    /// Adds the gradient of −ln p(gold) into `g`, returning the loss.
    fn accumulate_gradient(&self, src: &[u32], prefix: &[u32], gold: u32, g: &mut [Vec<f64>; 6]) -> f64 {
        let d = self.dims;
        let e = d.emb_dim;
        let act = self.activations(src, prefix);
        let loss = -act.probs[gold as usize].max(f64::MIN_POSITIVE).ln();

        let mut d_repr = vec![0.0f64; d.repr_dim];
        for k in 0..d.tgt_vocab {
            let dl = act.probs[k] - if k == gold as usize { 1.0 } else { 0.0 };
            let row = &mut g[4][k * d.repr_dim..(k + 1) * d.repr_dim];
            for (gw, &h) in row.iter_mut().zip(&act.repr) {
                *gw += dl * h as f64;
            }
            g[5][k] += dl;
            for (dr, &w) in d_repr.iter_mut().zip(self.w_o.row(k)) {
                *dr += dl * w as f64;
            }
        }

        let mut d_input = vec![0.0f64; d.input_dim()];
        for j in 0..d.repr_dim {
            let h = act.repr[j] as f64;
            let dp = d_repr[j] * (1.0 - h * h);
            if dp == 0.0 {
                continue;
            }
            let row = &mut g[2][j * d.input_dim()..(j + 1) * d.input_dim()];
            for (gw, &x) in row.iter_mut().zip(&act.input) {
                *gw += dp * x as f64;
            }
            g[3][j] += dp;
            for (di, &w) in d_input.iter_mut().zip(self.w_h.row(j)) {
                *di += dp * w as f64;
            }
        }

        let inv_len = 1.0 / src.len() as f64;
        for &s in src {
            let row = &mut g[0][s as usize * e..(s as usize + 1) * e];
            for (gw, &di) in row.iter_mut().zip(&d_input[..e]) {
                *gw += di * inv_len;
            }
        }
        for (slot, &tok) in act.window_tokens.iter().enumerate() {
            let row = &mut g[1][tok as usize * e..(tok as usize + 1) * e];
            for (gw, &di) in row.iter_mut().zip(&d_input[(slot + 1) * e..(slot + 2) * e]) {
                *gw += di;
            }
        }
        loss
    }

    fn zero_grads(&self) -> [Vec<f64>; 6] {
        self.tensors().map(|t| vec![0.0; t.len()])
    }
}

/// Teacher-forced cross-entropy training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Sentences per mini-batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Embedding init bound for training from scratch. Rows of tokens absent
    /// from the training corpus never move from it, so a small bound leaves
    /// unseen tokens nearly indistinguishable. Ignored by [`finetune`].
    pub embedding_init: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, lr: 3e-3, batch_size: 16, seed: 0, embedding_init: 0.1 }
    }
}

/// Per-epoch mean training loss, measured before each batch update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Trains a freshly initialized model on `corpus`.
pub fn train(corpus: &Corpus, dims: ModelDims, cfg: &TrainConfig) -> Result<(ToyModel, TrainLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = ToyModel::init_with_embedding_scale(dims, rng.random(), cfg.embedding_init)?;
    run_training(model, corpus, cfg, &mut rng)
}

/// Continues training from `model`'s parameters with a fresh optimizer state.
pub fn finetune(model: &ToyModel, corpus: &Corpus, cfg: &TrainConfig) -> Result<(ToyModel, TrainLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let _: u64 = rng.random();
    run_training(model.clone(), corpus, cfg, &mut rng)
}

fn run_training(mut model: ToyModel, corpus: &Corpus, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(ToyModel, TrainLog)> {
    model.check_corpus(corpus)?;
    if cfg.batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut adam = AdamState::new(&shapes);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut epoch_loss, mut epoch_n) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.zero_grads();
            let mut n = 0usize;
            for &i in batch {
                let pair = &corpus.pairs[i];
                for t in 0..pair.tgt.len() {
                    epoch_loss += model.accumulate_gradient(&pair.src, &pair.tgt[..t], pair.tgt[t], &mut grads);
                    n += 1;
                }
            }
            epoch_n += n;
            let scale = 1.0 / n as f64;
            let grads32: Vec<Vec<f32>> =
                grads.iter().map(|g| g.iter().map(|&x| (x * scale) as f32).collect()).collect();
            let grad_refs: Vec<&[f32]> = grads32.iter().map(Vec::as_slice).collect();
            adam_step(&mut model.tensors_mut(), &grad_refs, &mut adam, cfg.lr)?;
        }
        let mean = epoch_loss / epoch_n as f64;
        log::debug!("toy model epoch {epoch}: mean cross-entropy {mean:.4}");
        log.epoch_losses.push(mean);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::corpus::{generate_corpora, GenConfig, SentencePair, EOS};
    use proptest::prelude::*;

    fn tiny_dims() -> ModelDims {
        ModelDims { src_vocab: 12, tgt_vocab: 10, emb_dim: 4, repr_dim: 6, window: 2 }
    }

    fn one_pair() -> Corpus {
        Corpus::new("one", vec![SentencePair { src: vec![3, 5, 7, 4], tgt: vec![6, 8, 3, 9, EOS] }])
    }

    #[test]
    fn forward_is_a_distribution_and_deterministic() {
        let m = ToyModel::init(tiny_dims(), 3).unwrap();
        let a = m.forward(&[3, 4, 5], &[]).unwrap();
        let b = m.forward(&[3, 4, 5], &[]).unwrap();
        assert_eq!(a, b);
        assert!((a.p_nmt.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(a.repr.dim(), 6);
        assert_eq!(m.representation(&[3, 4, 5], &[]).unwrap(), a.repr);
    }

    #[test]
    fn forward_rejects_bad_ids() {
        let m = ToyModel::init(tiny_dims(), 3).unwrap();
        assert!(m.forward(&[12], &[]).is_err());
        assert!(m.forward(&[3], &[10]).is_err());
        assert!(m.forward(&[], &[]).is_err());
    }

    #[test]
    fn window_padding() {
        let m = ToyModel::init(ModelDims { window: 3, ..tiny_dims() }, 1).unwrap();
        assert_eq!(m.window_tokens(&[]), vec![PAD, PAD, BOS]);
        assert_eq!(m.window_tokens(&[5]), vec![PAD, BOS, 5]);
        assert_eq!(m.window_tokens(&[5, 6]), vec![BOS, 5, 6]);
        assert_eq!(m.window_tokens(&[5, 6, 7, 8]), vec![6, 7, 8]);
    }

    /// Independent f64 loss used as a finite-difference oracle.
    fn shadow_loss(m: &ToyModel, params: &[Vec<f64>], src: &[u32], prefix: &[u32], gold: u32) -> f64 {
        let d = m.dims;
        let e = d.emb_dim;
        let mut x = vec![0.0; d.input_dim()];
        for &s in src {
            for c in 0..e {
                x[c] += params[0][s as usize * e + c] / src.len() as f64;
            }
        }
        for (slot, &t) in m.window_tokens(prefix).iter().enumerate() {
            for c in 0..e {
                x[(slot + 1) * e + c] = params[1][t as usize * e + c];
            }
        }
        let h: Vec<f64> = (0..d.repr_dim)
            .map(|j| {
                (0..d.input_dim()).map(|i| params[2][j * d.input_dim() + i] * x[i]).sum::<f64>() + params[3][j]
            })
            .map(f64::tanh)
            .collect();
        let logits: Vec<f64> = (0..d.tgt_vocab)
            .map(|k| (0..d.repr_dim).map(|j| params[4][k * d.repr_dim + j] * h[j]).sum::<f64>() + params[5][k])
            .collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
        lse - logits[gold as usize]
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let m = ToyModel::init(tiny_dims(), 17).unwrap();
        let (src, prefix, gold) = ([3u32, 5, 7, 5], [6u32, 8, 3], 9u32);
        let mut g = m.zero_grads();
        m.accumulate_gradient(&src, &prefix, gold, &mut g);
        let shadow: Vec<Vec<f64>> = m.tensors().iter().map(|t| t.iter().map(|&x| x as f64).collect()).collect();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for ti in 0..6 {
            for i in 0..shadow[ti].len() {
                let mut p = shadow.clone();
                p[ti][i] += h;
                let up = shadow_loss(&m, &p, &src, &prefix, gold);
                p[ti][i] -= 2.0 * h;
                let down = shadow_loss(&m, &p, &src, &prefix, gold);
                let num = (up - down) / (2.0 * h);
                let ana = g[ti][i];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn overfits_a_single_pair() {
        let corpus = one_pair();
        let cfg = TrainConfig { epochs: 300, lr: 1e-2, batch_size: 1, seed: 5, ..TrainConfig::default() };
        let (m, log) = train(&corpus, tiny_dims(), &cfg).unwrap();
        assert!(log.epoch_losses.last().unwrap() < &0.05);
        let pair = &corpus.pairs[0];
        for t in 0..pair.tgt.len() {
            let out = m.forward(&pair.src, &pair.tgt[..t]).unwrap();
            assert_eq!(out.p_nmt.argmax(), pair.tgt[t], "step {t}");
        }
    }

    fn small_data() -> (crate::toymodel::corpus::GeneratedData, ModelDims) {
        let g = generate_corpora(&GenConfig {
            source_vocab: 20,
            lexicon_size: 20,
            upstream_sentences: 20,
            downstream_train: 20,
            min_len: 3,
            max_len: 6,
            branching: 2,
            seed: 4,
            ..GenConfig::default()
        })
        .unwrap();
        let dims = ModelDims::new(g.vocab.source.len(), g.vocab.target.len());
        (g, dims)
    }

    #[test]
    fn training_reduces_loss_and_beats_chance() {
        let (g, dims) = small_data();
        let cfg = TrainConfig { epochs: 50, lr: 1e-2, batch_size: 4, seed: 2, ..TrainConfig::default() };
        let initial = ToyModel::init(dims, 0).unwrap().mean_cross_entropy(&g.upstream).unwrap();
        let (m, log) = train(&g.upstream, dims, &cfg).unwrap();
        assert!(log.epoch_losses.last().unwrap() < &log.epoch_losses[0]);
        assert!(m.mean_cross_entropy(&g.upstream).unwrap() < initial);
        let acc = m.next_token_accuracy(&g.upstream).unwrap();
        assert!(acc > 10.0 / dims.tgt_vocab as f64, "accuracy {acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let (g, dims) = small_data();
        let cfg = TrainConfig { epochs: 3, lr: 1e-2, batch_size: 4, seed: 9, ..TrainConfig::default() };
        let a = train(&g.upstream, dims, &cfg).unwrap().0;
        let b = train(&g.upstream, dims, &cfg).unwrap().0;
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert!(train(&Corpus::new("e", vec![]), dims, &cfg).is_err());
    }

    #[test]
    fn finetune_behaviour() {
        let (g, dims) = small_data();
        let cfg = TrainConfig { epochs: 30, lr: 1e-2, batch_size: 4, seed: 1, ..TrainConfig::default() };
        let (up, _) = train(&g.upstream, dims, &cfg).unwrap();

        let zero = TrainConfig { epochs: 0, ..cfg.clone() };
        assert_eq!(finetune(&up, &g.train, &zero).unwrap().0, up);

        let ft_cfg = TrainConfig { epochs: 30, seed: 3, ..cfg };
        let (down, _) = finetune(&up, &g.train, &ft_cfg).unwrap();
        let (down2, _) = finetune(&up, &g.train, &ft_cfg).unwrap();
        assert_eq!(down, down2);
        assert!(down.next_token_accuracy(&g.train).unwrap() >= up.next_token_accuracy(&g.train).unwrap());

        let bad = Corpus::new("bad", vec![SentencePair { src: vec![3], tgt: vec![dims.tgt_vocab as u32] }]);
        assert!(finetune(&up, &bad, &ft_cfg).is_err());
    }

    #[test]
    fn embed_value_is_the_table_row() {
        let m = ToyModel::init(tiny_dims(), 8).unwrap();
        let v = m.embed_value(7).unwrap();
        assert_eq!(v.dim(), 4);
        assert_eq!(v, m.embed_value(7).unwrap());
        assert!(m.embed_value(10).is_err());

        // Read row 7 straight out of the serialized file: header is 4 + 4 + 5·4
        // bytes, followed by the source table and then the target table.
        let bytes = m.to_bytes();
        let d = m.dims();
        let off = 28 + d.src_vocab * d.emb_dim * 4 + 7 * d.emb_dim * 4;
        let from_file: Vec<f32> = bytes[off..off + 16].chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(v.0, from_file);
    }

    #[test]
    fn file_round_trip_and_errors() {
        let m = ToyModel::init(tiny_dims(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        m.save(&path).unwrap();
        assert_eq!(ToyModel::load(&path).unwrap(), m);

        let mut bytes = m.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(ToyModel::from_bytes(&bytes), Err(Error::BadMagic { .. })));

        let mut bytes = m.to_bytes();
        bytes[4] = 9;
        assert!(matches!(ToyModel::from_bytes(&bytes), Err(Error::UnsupportedVersion { .. })));

        let bytes = m.to_bytes();
        assert!(matches!(ToyModel::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));

        let mut bytes = m.to_bytes();
        bytes.extend_from_slice(&[0; 8]);
        assert!(matches!(ToyModel::from_bytes(&bytes), Err(Error::InconsistentDims(_))));

        assert!(matches!(ToyModel::load(&dir.path().join("missing.bin")), Err(Error::File { .. })));
    }

    proptest! {
        #[test]
        fn repr_depends_only_on_window(
            src in prop::collection::vec(3u32..12, 1..6),
            tail in prop::collection::vec(3u32..10, 2..=2),
            head_a in prop::collection::vec(3u32..10, 0..5),
            head_b in prop::collection::vec(3u32..10, 0..5),
        ) {
            let m = ToyModel::init(tiny_dims(), 4).unwrap();
            let a: Vec<u32> = head_a.iter().chain(&tail).copied().collect();
            let b: Vec<u32> = head_b.iter().chain(&tail).copied().collect();
            prop_assert_eq!(m.representation(&src, &a).unwrap(), m.representation(&src, &b).unwrap());
        }

        #[test]
        fn forward_always_normalized(src in prop::collection::vec(3u32..12, 1..6), prefix in prop::collection::vec(0u32..10, 0..6)) {
            let m = ToyModel::init(tiny_dims(), 6).unwrap();
            let out = m.forward(&src, &prefix).unwrap();
            let s: f64 = out.p_nmt.probs().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(out.p_nmt.probs().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}
