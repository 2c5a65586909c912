//! Shared resampling and percentile conventions used by the bootstrap
//! confidence intervals in `metrics` and `concordance`.
//!
//! The resampler is deliberately simple so that an independent
//! reimplementation can reproduce it from this description alone: indices
//! are drawn as `rng.next_u64() % n` from a ChaCha8 stream seeded with
//! `seed_from_u64(seed)`, one replicate's indices drawn back to back before
//! the next replicate starts.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One bootstrap draw of `n` indices with replacement.
#[inline]
pub fn draw_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| (rng.next_u64() % n as u64) as usize).collect()
}

/// Uniform f64 in [0, 1) from the raw stream; used by the phantom
/// generator to stay independent of distribution-crate internals.
#[inline]
pub fn next_unit_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Linear-interpolation percentile on a sorted slice, q in [0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = rank - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// Percentile-bootstrap 95% confidence interval for the mean of `values`.
/// Returns (ci_low, ci_high). Deterministic for a fixed seed.
pub fn bootstrap_mean_ci(values: &[f64], replicates: usize, seed: u64) -> (f64, f64) {
    assert!(!values.is_empty());
    let mut rng = seeded_rng(seed);
    let mut means = Vec::with_capacity(replicates);
    for _ in 0..replicates {
        let idx = draw_indices(&mut rng, values.len());
        let sum: f64 = idx.iter().map(|&i| values[i]).sum();
        means.push(sum / values.len() as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (percentile(&means, 2.5), percentile(&means, 97.5))
}
