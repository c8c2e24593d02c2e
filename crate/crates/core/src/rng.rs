//! Deterministic RNG streams and order-stable reductions.
//!
//! Every stochastic routine in the crate derives its generator from a user
//! seed plus a stream index, so replications can run in parallel while staying
//! bit-identical across thread counts. Sums over samples use a fixed-shape
//! pairwise tree so the floating-point association order never depends on the
//! execution schedule.

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// SplitMix64 finalizer; used to decorrelate derived seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a base seed and a stream index.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream.wrapping_add(0x51ed_270b)))
}

/// Deterministic generator for a (seed, stream) pair.
pub fn stream_rng(base: u64, stream: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(base, stream))
}

/// Generator seeded directly from a user seed.
pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

const PAIRWISE_LEAF: usize = 32;

/// Pairwise-tree sum of scalars with a fixed association order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Pairwise-tree mean; zero for an empty slice.
pub fn pairwise_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        pairwise_sum(values) / values.len() as f64
    }
}

/// Pairwise-tree sum of equally sized vectors.
pub fn pairwise_sum_vec(rows: &[DVector<f64>]) -> DVector<f64> {
    assert!(!rows.is_empty(), "pairwise_sum_vec needs at least one row");
    if rows.len() <= PAIRWISE_LEAF {
        let mut acc = rows[0].clone();
        for r in &rows[1..] {
            acc += r;
        }
        return acc;
    }
    let mid = rows.len() / 2;
    pairwise_sum_vec(&rows[..mid]) + pairwise_sum_vec(&rows[mid..])
}

/// Pairwise-tree sum of equally sized matrices.
pub fn pairwise_sum_mat(rows: &[DMatrix<f64>]) -> DMatrix<f64> {
    assert!(!rows.is_empty(), "pairwise_sum_mat needs at least one row");
    if rows.len() <= PAIRWISE_LEAF {
        let mut acc = rows[0].clone();
        for r in &rows[1..] {
            acc += r;
        }
        return acc;
    }
    let mid = rows.len() / 2;
    pairwise_sum_mat(&rows[..mid]) + pairwise_sum_mat(&rows[mid..])
}
