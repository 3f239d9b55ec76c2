#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revknn_core::reviser::{self, DistanceMode, ReviserDims, ReviserParams};
use revknn_core::{Datastore, DatastoreEntry, TrainingRecord, Vector};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vector(rng: &mut ChaCha8Rng, dim: usize, scale: f32) -> Vector {
    Vector((0..dim).map(|_| rng.random_range(-scale..=scale)).collect())
}

pub fn random_record(rng: &mut ChaCha8Rng, repr_dim: usize, emb_dim: usize) -> TrainingRecord {
    TrainingRecord {
        key: random_vector(rng, repr_dim, 1.0),
        key_down: random_vector(rng, repr_dim, 1.0),
        value: rng.random_range(3..50),
        emb: random_vector(rng, emb_dim, 1.0),
        emb_down: random_vector(rng, emb_dim, 1.0),
        avg_query: random_vector(rng, repr_dim, 1.0),
        count: rng.random_range(1..10),
    }
}

/// Parameters with every entry (biases included) drawn from ±0.5.
pub fn random_params(rng: &mut ChaCha8Rng, dims: ReviserDims) -> ReviserParams {
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-0.5f32..=0.5)).collect::<Vec<f32>>();
    let w1 = draw(dims.hidden * dims.input_dim());
    let b1 = draw(dims.hidden);
    let w2 = draw(dims.repr_dim * dims.hidden);
    let b2 = draw(dims.repr_dim);
    ReviserParams::from_blocks(dims, w1, b1, w2, b2).unwrap()
}

fn with_entry(params: &ReviserParams, tensor: usize, index: usize, shift: f32) -> ReviserParams {
    let mut blocks: Vec<Vec<f32>> = params.tensors().iter().map(|t| t.to_vec()).collect();
    blocks[tensor][index] += shift;
    let [w1, b1, w2, b2]: [Vec<f32>; 4] = blocks.try_into().unwrap();
    ReviserParams::from_blocks(params.dims(), w1, b1, w2, b2).unwrap()
}

fn mean_loss(params: &ReviserParams, records: &[TrainingRecord], alpha: f64, mode: DistanceMode) -> f64 {
    records.iter().map(|r| reviser::loss(params, r, alpha, mode).unwrap()).sum::<f64>() / records.len() as f64
}

/// Largest relative error between analytic and central-difference gradients
/// of the mean loss. The step is a power of two, so perturbed `f32` entries
/// are exact.
pub fn max_gradient_error(params: &ReviserParams, records: &[TrainingRecord], alpha: f64, mode: DistanceMode) -> f64 {
    let h = 2f32.powi(-12);
    let g = reviser::gradients(params, records, alpha, mode).unwrap();
    let mut worst = 0.0f64;
    for (t, analytic) in g.tensors().iter().enumerate() {
        for (i, &a) in analytic.iter().enumerate() {
            let up = mean_loss(&with_entry(params, t, i, h), records, alpha, mode);
            let down = mean_loss(&with_entry(params, t, i, -h), records, alpha, mode);
            let numeric = (up - down) / (2.0 * h as f64);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Store of `n` random keys laid out as one entry per (sentence, timestep).
pub fn random_store(rng: &mut ChaCha8Rng, n: usize, dim: usize, vocab: u32) -> Datastore {
    let mut ds = Datastore::new(dim, "random", [0; 32]).unwrap();
    for i in 0..n {
        ds.push(DatastoreEntry {
            key: random_vector(rng, dim, 1.0),
            value: rng.random_range(3..vocab),
            sent_id: (i / 10) as u32,
            timestep: (i % 10) as u32,
        })
        .unwrap();
    }
    ds
}
