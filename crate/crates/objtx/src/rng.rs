//! Deterministic random number streams.
//!
//! Every stochastic stage (corpus generation, parameter init, mask
//! selection, batch sampling, dropout) draws from its own named substream
//! derived from the run's root seed. Streams are therefore independent:
//! adding draws to one stage never perturbs another, and a fixed root seed
//! reproduces a run bit for bit.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used everywhere in this crate.
pub type SubRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over a byte slice, seeded so distinct `(seed, name)` pairs land in
/// distinct streams.
pub(crate) fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ seed.wrapping_mul(FNV_PRIME);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Derive the named substream of `root_seed`.
pub fn substream(root_seed: u64, name: &str) -> SubRng {
    ChaCha8Rng::seed_from_u64(fnv1a(root_seed, name.as_bytes()))
}

/// Derive the `index`-th member of a substream family, e.g. one independent
/// stream per movie. Folding the index into the hash keeps members
/// independent of each other and of the unindexed stream.
pub fn substream_indexed(root_seed: u64, name: &str, index: u64) -> SubRng {
    let h = fnv1a(root_seed, name.as_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a(h, &index.to_le_bytes()))
}

/// Standard normal draw via Box-Muller; consumes exactly two uniforms.
pub fn standard_normal(rng: &mut SubRng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1], keeps ln finite
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Normal draw with mean zero and the given std, resampled until it falls
/// within `bound_sigmas` standard deviations.
pub fn truncated_normal(rng: &mut SubRng, std: f64, bound_sigmas: f64) -> f64 {
    loop {
        let z = standard_normal(rng);
        if z.abs() <= bound_sigmas {
            return z * std;
        }
    }
}

/// Choose `k` distinct indices from `0..n` uniformly, in draw order.
/// Requires `k <= n`.
pub fn sample_distinct(rng: &mut SubRng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} distinct from {n}");
    let mut pool: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
        out.push(pool[i]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let mut a = substream(7, "mask");
        let mut b = substream(7, "mask");
        let mut c = substream(7, "batch");
        let xs: Vec<u64> = (0..4).map(|_| a.gen()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.gen()).collect();
        let zs: Vec<u64> = (0..4).map(|_| c.gen()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn indexed_substreams_are_mutually_independent() {
        let mut a = substream_indexed(7, "corpus", 0);
        let mut b = substream_indexed(7, "corpus", 1);
        let mut c = substream_indexed(7, "corpus", 0);
        let mut base = substream(7, "corpus");
        let xs: Vec<u64> = (0..4).map(|_| a.gen()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.gen()).collect();
        let zs: Vec<u64> = (0..4).map(|_| c.gen()).collect();
        let ws: Vec<u64> = (0..4).map(|_| base.gen()).collect();
        assert_eq!(xs, zs);
        assert_ne!(xs, ys);
        assert_ne!(xs, ws);
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = substream(1, "init");
        let mut b = substream(2, "init");
        let xs: Vec<u64> = (0..4).map(|_| a.gen()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.gen()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn truncated_normal_respects_bound_and_matches_moments() {
        let mut rng = substream(11, "init");
        let n = 20_000;
        let std = 0.02;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let z = truncated_normal(&mut rng, std, 2.0);
            assert!(z.abs() <= 2.0 * std + 1e-12);
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        // Variance of a normal truncated at 2 sigma is about 0.774 sigma^2.
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 1e-3);
        let expected_var = 0.7737 * std * std;
        assert!((var - expected_var).abs() / expected_var < 0.05);
    }

    #[test]
    fn sample_distinct_is_distinct_and_in_range() {
        let mut rng = substream(3, "mask");
        for _ in 0..100 {
            let ks = sample_distinct(&mut rng, 10, 7);
            let mut seen = [false; 10];
            for &k in &ks {
                assert!(k < 10);
                assert!(!seen[k], "duplicate index {k}");
                seen[k] = true;
            }
            assert_eq!(ks.len(), 7);
        }
    }

    #[test]
    fn sample_distinct_full_draw_is_permutation() {
        let mut rng = substream(5, "mask");
        let mut ks = sample_distinct(&mut rng, 6, 6);
        ks.sort_unstable();
        assert_eq!(ks, vec![0, 1, 2, 3, 4, 5]);
    }
}
