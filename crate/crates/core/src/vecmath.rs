//! Dense vector/matrix arithmetic, distances, temperature softmax and Adam.
//!
//! Storage is `f32`; dot products, reductions and softmax accumulate in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// A dense `f32` vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(pub Vec<f32>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// Euclidean norm, accumulated in `f64`.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
    }
}

impl From<Vec<f32>> for Vector {
    fn from(v: Vec<f32>) -> Self {
        Vector(v)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f32;
    fn index(&self, i: usize) -> &f32 {
        &self.0[i]
    }
}

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::contract("matrix dimensions must be positive"));
        }
        if data.len() != rows * cols {
            return Err(Error::DimMismatch { expected: rows * cols, actual: data.len() });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Σ (a_i − b_i)².
pub fn squared_l2(a: &[f32], b: &[f32]) -> Result<f64> {
    ensure_dim(a.len(), b.len())?;
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum())
}

/// Euclidean distance ‖a − b‖.
pub fn l2_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    squared_l2(a, b).map(f64::sqrt)
}

/// p_i ∝ exp(−d_i / T), normalized with the max-shift trick.
pub fn temperature_softmax(distances: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if distances.is_empty() {
        return Err(Error::contract("softmax over an empty list"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::contract(format!("temperature must be positive, got {temperature}")));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::contract("non-finite distance"));
    }
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let mut weights: Vec<f64> = distances.iter().map(|&d| (-(d - min) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// Plain softmax over logits, `f64` in and out.
pub(crate) fn softmax_logits(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in logits.iter_mut() {
        *l /= total;
    }
}

/// W·x + b.
pub fn affine(w: &Matrix, x: &[f32], b: &[f32]) -> Result<Vector> {
    ensure_dim(w.cols, x.len())?;
    ensure_dim(w.rows, b.len())?;
    Ok(Vector(
        (0..w.rows).map(|r| (dot_f64(w.row(r), x) + b[r] as f64) as f32).collect(),
    ))
}

/// Adam moment accumulators for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(shapes: &[usize]) -> Self {
        Self::with_hyper(shapes, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(shapes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every tensor in `params`.
pub fn adam_step(params: &mut [&mut [f32]], grads: &[&[f32]], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::contract(format!(
            "adam: {} parameter tensors, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first[i].len() {
            return Err(Error::contract(format!(
                "adam: tensor {i} has {} params, {} grads, {} moments",
                p.len(),
                g.len(),
                state.first[i].len()
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract(format!("adam: non-finite gradient in tensor {i}")));
        }
    }
    if !(lr > 0.0) {
        return Err(Error::contract("adam: learning rate must be positive"));
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for j in 0..p.len() {
            let gj = g[j] as f64;
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] = (p[j] as f64 - lr * m_hat / (v_hat.sqrt() + state.eps)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l2_examples() {
        assert_eq!(l2_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(l2_distance(&[1.5, -2.0, 7.0], &[1.5, -2.0, 7.0]).unwrap(), 0.0);
        assert_eq!(squared_l2(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(squared_l2(&[2.0, 1.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(l2_distance(&[1.0], &[1.0, 2.0]), Err(Error::DimMismatch { .. })));
        assert!(squared_l2(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn l2_matches_reference_values() {
        // Frozen from an independent mpmath computation at 50 digits.
        let a = [
            0.8123f32, -1.25, 3.5, 0.001, -0.75, 2.25, -3.125, 0.5, 1.0, -2.0, 0.3, 0.7, -0.9, 4.0, -4.5, 0.0625,
        ];
        let b = [
            -0.1f32, 0.25, 3.0, -0.002, 1.75, -2.25, 3.125, -0.5, 1.5, 2.0, -0.3, 0.1, 0.9, 3.5, 4.5, -0.0625,
        ];
        let expected = 13.090_852_729_359_359_f64;
        let got = l2_distance(&a, &b).unwrap();
        assert!(((got - expected) / expected).abs() < 1e-6, "{got} vs {expected}");
        let sq = squared_l2(&a, &b).unwrap();
        assert!((sq - got * got).abs() / sq < 1e-6);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(temperature_softmax(&[42.0], 1.0).unwrap(), vec![1.0]);
        let p = temperature_softmax(&[5.0, 5.0, 5.0], 2.0).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        for t in [0.5, 1.0, 10.0, 123.0] {
            let p = temperature_softmax(&[0.0, t * std::f64::consts::LN_2], t).unwrap();
            assert!((p[0] - 2.0 / 3.0).abs() < 1e-6);
            assert!((p[1] - 1.0 / 3.0).abs() < 1e-6);
        }
        assert!(temperature_softmax(&[], 1.0).is_err());
        assert!(temperature_softmax(&[1.0], 0.0).is_err());
        assert!(temperature_softmax(&[1.0], -1.0).is_err());
    }

    #[test]
    fn affine_examples() {
        let y = affine(&Matrix::identity(2), &[3.0, 4.0], &[0.0, 0.0]).unwrap();
        assert_eq!(y.0, vec![3.0, 4.0]);
        let y = affine(&Matrix::zeros(2, 5), &[1.0, -2.0, 3.0, 9.0, 0.5], &[1.0, 2.0]).unwrap();
        assert_eq!(y.0, vec![1.0, 2.0]);
        assert!(affine(&Matrix::zeros(2, 3), &[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(affine(&Matrix::zeros(2, 2), &[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn affine_matches_reference_values() {
        // 4×3 case, expected values from exact rational arithmetic on the f32 inputs.
        let w = Matrix::from_vec(
            4,
            3,
            vec![0.5, -1.25, 2.0, 0.125, 0.75, -0.5, -2.5, 1.0, 0.25, 3.0, 0.0, -1.5],
        )
        .unwrap();
        let x = [0.3f32, -0.7, 1.9];
        let b = [0.1f32, -0.2, 0.05, 1.0];
        let expected = [4.924_999_944_865_704_f64, -1.637_499_980_628_490_4, -0.925_000_023_096_799_9, -0.949_999_928_474_426_3];
        let y = affine(&w, &x, &b).unwrap();
        for (g, e) in y.0.iter().zip(expected) {
            assert!(((*g as f64 - e) / e).abs() < 1e-6, "{g} vs {e}");
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = vec![1.0f32, -2.0, 3.5];
        let g = vec![0.0f32; 3];
        let mut st = AdamState::new(&[3]);
        adam_step(&mut [&mut p[..]], &[&g[..]], &mut st, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        for g in [0.3f32, -5.0, 1e-3] {
            let mut p = vec![0.0f32];
            let mut st = AdamState::new(&[1]);
            adam_step(&mut [&mut p[..]], &[&[g][..]], &mut st, 0.01).unwrap();
            let expected = -0.01 * g as f64 / (g.abs() as f64 + 1e-8);
            assert!((p[0] as f64 - expected).abs() < 1e-8, "{} vs {expected}", p[0]);
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = vec![0.0f32; 2];
        let mut st = AdamState::new(&[2]);
        assert!(adam_step(&mut [&mut p[..]], &[&[1.0][..]], &mut st, 0.1).is_err());
        let mut st = AdamState::new(&[3]);
        assert!(adam_step(&mut [&mut p[..]], &[&[1.0, 1.0][..]], &mut st, 0.1).is_err());
        assert_eq!(st.step(), 0);
    }

    /// Textbook Adam written independently in f64.
    fn reference_adam(p0: &[f64], grads: &[Vec<f64>], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let mut p = p0.to_vec();
        let mut m = vec![0.0; p.len()];
        let mut v = vec![0.0; p.len()];
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as f64;
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powf(t));
                let vh = v[i] / (1.0 - b2.powf(t));
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        p
    }

    #[test]
    fn adam_matches_reference_over_100_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10;
        // Keep parameters away from zero so a relative comparison is meaningful.
        let p0: Vec<f32> = (0..n)
            .map(|i| rng.random_range(0.5..1.5) * if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let grads: Vec<Vec<f32>> =
            (0..100).map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut p = p0.clone();
        let mut st = AdamState::new(&[n]);
        for g in &grads {
            adam_step(&mut [&mut p[..]], &[&g[..]], &mut st, 1e-3).unwrap();
        }
        let expect = reference_adam(
            &p0.iter().map(|&x| x as f64).collect::<Vec<_>>(),
            &grads.iter().map(|g| g.iter().map(|&x| x as f64).collect()).collect::<Vec<_>>(),
            1e-3,
        );
        for (a, b) in p.iter().zip(&expect) {
            assert!(((*a as f64 - b) / b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let g = vec![0.25f32, -0.5, 1.0];
        let run = || {
            let mut p = vec![0.1f32, 0.2, 0.3];
            let mut st = AdamState::new(&[3]);
            for _ in 0..5 {
                adam_step(&mut [&mut p[..]], &[&g[..]], &mut st, 0.05).unwrap();
            }
            p.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-100.0f32..100.0, n)
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(d in prop::collection::vec(-1e3f64..1e3, 1..64), t in 0.01f64..100.0) {
            let p = temperature_softmax(&d, t).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn triangle_inequality(a in finite_vec(8), b in finite_vec(8), c in finite_vec(8)) {
            let ab = l2_distance(&a, &b).unwrap();
            let bc = l2_distance(&b, &c).unwrap();
            let ac = l2_distance(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-5);
            prop_assert_eq!(ab, l2_distance(&b, &a).unwrap());
        }

        #[test]
        fn affine_is_linear(
            w in finite_vec(12),
            x in finite_vec(4),
            y in finite_vec(4),
            alpha in -3.0f32..3.0,
            beta in -3.0f32..3.0,
        ) {
            let w = Matrix::from_vec(3, 4, w).unwrap();
            let zero = [0.0f32; 3];
            let comb: Vec<f32> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = affine(&w, &comb, &zero).unwrap();
            let fx = affine(&w, &x, &zero).unwrap();
            let fy = affine(&w, &y, &zero).unwrap();
            for i in 0..3 {
                let rhs = alpha as f64 * fx[i] as f64 + beta as f64 * fy[i] as f64;
                // Relative to the magnitude of the summed terms; cancellation makes
                // a pointwise relative bound meaningless near zero.
                let scale: f64 = w.row(i).iter().zip(&comb).map(|(a, b)| (a * b).abs() as f64).sum::<f64>()
                    + (alpha as f64 * fx[i] as f64).abs()
                    + (beta as f64 * fy[i] as f64).abs()
                    + 1e-6;
                prop_assert!((lhs[i] as f64 - rhs).abs() / scale < 1e-5);
            }
        }
    }
}
