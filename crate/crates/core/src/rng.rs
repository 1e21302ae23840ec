//! Seeded, platform-independent randomness.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a stream index into a base seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// An in-batch permutation for drawing marginal pairs. Shuffles until no
/// index maps to itself, giving up after five attempts; the identity itself
/// is never returned for `n >= 2`.
pub fn marginal_permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut best = permutation(n, rng);
    for _ in 0..5 {
        if best.iter().enumerate().all(|(i, &p)| i != p) {
            return best;
        }
        best = permutation(n, rng);
    }
    if n >= 2 && best.iter().enumerate().all(|(i, &p)| i == p) {
        best.rotate_left(1);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marginal_permutation_never_identity() {
        let mut rng = seeded(3);
        for n in 2..12 {
            for _ in 0..50 {
                let p = marginal_permutation(n, &mut rng);
                assert!(p.iter().enumerate().any(|(i, &v)| i != v));
                let mut s = p.clone();
                s.sort_unstable();
                assert_eq!(s, (0..n).collect::<Vec<_>>());
            }
        }
        assert_eq!(marginal_permutation(1, &mut rng), vec![0]);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
