//! Fixtures shared by the benchmarks.

use fedcap_core::rng::seeded;

/// `n` vectors of length `dim` in two well-separated groups.
pub fn two_groups(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::Rng;
    let mut rng = seeded(seed);
    (0..n)
        .map(|i| {
            let base = if i % 2 == 0 { 1.0 } else { -1.0 };
            (0..dim).map(|_| base + rng.gen_range(-0.1..0.1)).collect()
        })
        .collect()
}
