//! Largest-singular-value estimates by power iteration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Stable 64-bit FNV-1a hash, used to seed per-parameter start vectors.
pub fn path_seed(path: &str) -> u64 {
    path.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Estimates σ_max of a matrix (last two axes) by `iters` rounds of power
/// iteration on WᵀW from a start vector drawn from `seed`.
///
/// The estimate is ‖W v‖ for the normalized iterate v, which never exceeds
/// σ_max and is non-decreasing in `iters`. A zero matrix gives 0.
pub fn spectral_norm(w: &Tensor, iters: usize, seed: u64) -> f64 {
    let (rows, cols) = match w.shape() {
        [] => (1, 1),
        [n] => (1, *n),
        s => (s[s.len() - 2], s[s.len() - 1]),
    };
    if w.len() != rows * cols || rows == 0 || cols == 0 {
        return 0.0;
    }
    let a = w.data();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    if !normalize(&mut v) {
        v[0] = 1.0;
    }
    let mut u = vec![0.0; rows];
    let mut sigma = apply(a, &v, &mut u, rows, cols);
    for _ in 0..iters.max(1) {
        // v <- Wᵀ u / ‖·‖
        v.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..rows {
            let ui = u[i];
            for j in 0..cols {
                v[j] += a[i * cols + j] * ui;
            }
        }
        if !normalize(&mut v) {
            return 0.0;
        }
        sigma = apply(a, &v, &mut u, rows, cols);
    }
    sigma
}

/// u = W v, returns ‖u‖.
fn apply(a: &[f64], v: &[f64], u: &mut [f64], rows: usize, cols: usize) -> f64 {
    for i in 0..rows {
        u[i] = (0..cols).map(|j| a[i * cols + j] * v[j]).sum();
    }
    u.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}
