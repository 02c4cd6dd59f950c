//! Parameter initialization.
//!
//! Recurrent (hidden-to-hidden) matrices start orthogonal, input
//! matrices uniform with fan-in scaling, biases zero. All draws come
//! from an explicitly threaded ChaCha stream so a run is reproducible
//! from its seed alone.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

/// `[fan_in, fan_out]` matrix with entries uniform in
/// `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor { shape: vec![fan_in, fan_out], data }
}

/// Random `[n, n]` orthogonal matrix: a standard Gaussian sample pushed
/// through modified Gram-Schmidt. Degenerate pivots are re-drawn, which
/// for continuous samples never triggers in practice.
pub fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
        for prev in &cols {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (vi, pi) in v.iter_mut().zip(prev) {
                *vi -= dot * pi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for vi in &mut v {
            *vi /= norm;
        }
        cols.push(v);
    }
    let mut data = vec![0.0; n * n];
    for (col, v) in cols.iter().enumerate() {
        for (row, x) in v.iter().enumerate() {
            data[row * n + col] = *x;
        }
    }
    Tensor { shape: vec![n, n], data }
}

/// Box-Muller standard normal from two uniform draws.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
