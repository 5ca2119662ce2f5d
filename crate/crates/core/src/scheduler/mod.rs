//! Decaying re-clustering schedule: cluster at round 1, afterwards with
//! probability `1 / (1 + α·r)`.

use rand::Rng;

use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScheduleError {
    #[error("decay factor must be finite and nonnegative, got {0}")]
    InvalidAlpha(f64),
    #[error("rounds are numbered from 1")]
    ZeroRound,
}

/// Owns its own random stream so that changing α never shifts draws made
/// by other components.
#[derive(Debug, Clone)]
pub struct DecaySchedule {
    alpha: f64,
    always_cluster: bool,
    rng: StreamRng,
}

impl DecaySchedule {
    pub fn new(alpha: f64, always_cluster: bool, rng: StreamRng) -> Result<Self, ScheduleError> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(ScheduleError::InvalidAlpha(alpha));
        }
        Ok(Self { alpha, always_cluster, rng })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn always_cluster(&self) -> bool {
        self.always_cluster
    }

    /// Draws exactly one uniform value per call, including round 1 and the
    /// `always_cluster` baseline, so decision sequences stay aligned.
    pub fn should_cluster(&mut self, round: u64) -> Result<bool, ScheduleError> {
        if round == 0 {
            return Err(ScheduleError::ZeroRound);
        }
        let u: f64 = self.rng.gen();
        Ok(round == 1 || self.always_cluster || u <= threshold(round, self.alpha))
    }
}

/// Clustering probability at round `r ≥ 2`.
pub fn threshold(round: u64, alpha: f64) -> f64 {
    1.0 / (1.0 + alpha * round as f64)
}

/// `1 + Σ_{r=2..R} 1/(1 + α·r)`.
pub fn expected_cluster_count(rounds: u64, alpha: f64) -> f64 {
    if rounds == 0 {
        return 0.0;
    }
    1.0 + (2..=rounds).map(|r| threshold(r, alpha)).sum::<f64>()
}

/// Variance of the realized count (sum of independent Bernoulli trials).
pub fn cluster_count_variance(rounds: u64, alpha: f64) -> f64 {
    (2..=rounds)
        .map(|r| {
            let p = threshold(r, alpha);
            p * (1.0 - p)
        })
        .sum()
}

/// Expected share of clustering events falling in rounds `1..=early`.
pub fn expected_early_fraction(rounds: u64, early: u64, alpha: f64) -> f64 {
    expected_cluster_count(early.min(rounds), alpha) / expected_cluster_count(rounds, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, SeedTree};
    use proptest::prelude::*;

    fn count(seed: u64, rounds: u64, alpha: f64) -> u64 {
        let mut s = DecaySchedule::new(alpha, false, seeded(seed)).unwrap();
        (1..=rounds).filter(|&r| s.should_cluster(r).unwrap()).count() as u64
    }

    #[test]
    fn examples() {
        let mut s = DecaySchedule::new(50.0, false, seeded(1)).unwrap();
        assert!(s.should_cluster(1).unwrap());
        let mut zero = DecaySchedule::new(0.0, false, seeded(1)).unwrap();
        assert!((1..=500).all(|r| zero.should_cluster(r).unwrap()));
        assert_eq!(threshold(10, 0.1), 0.5);
        assert_eq!(expected_cluster_count(37, 0.0), 37.0);
        assert_eq!(expected_cluster_count(1, 0.3), 1.0);
        assert!(DecaySchedule::new(-0.1, false, seeded(1)).is_err());
        assert_eq!(s.should_cluster(0), Err(ScheduleError::ZeroRound));
    }

    #[test]
    fn summation_oracle() {
        // independent oracle: harmonic-style closed loop in a different order
        let mut oracle = 0.0;
        for r in (2..=200u32).rev() {
            oracle += 10.0 / (10.0 + f64::from(r));
        }
        assert!((expected_cluster_count(200, 0.1) - (1.0 + oracle)).abs() < 1e-12);
    }

    #[test]
    fn always_cluster_consumes_the_same_stream() {
        let mut a = DecaySchedule::new(0.1, true, seeded(3)).unwrap();
        let mut b = DecaySchedule::new(0.1, false, seeded(3)).unwrap();
        for r in 1..50 {
            assert!(a.should_cluster(r).unwrap());
            b.should_cluster(r).unwrap();
        }
        assert_eq!(a.rng, b.rng);
    }

    #[test]
    fn empirical_mean_within_three_standard_errors() {
        let tree = SeedTree::new(2024);
        let runs = 100;
        let total: u64 = (0..runs)
            .map(|i| {
                let mut s = DecaySchedule::new(0.1, false, tree.indexed("dfd", &[i])).unwrap();
                (1..=200).filter(|&r| s.should_cluster(r).unwrap()).count() as u64
            })
            .sum();
        let mean = total as f64 / runs as f64;
        let se = (cluster_count_variance(200, 0.1) / runs as f64).sqrt();
        assert!((mean - expected_cluster_count(200, 0.1)).abs() <= 3.0 * se);
    }

    #[test]
    fn early_rounds_dominate() {
        assert!(expected_early_fraction(200, 50, 0.1) > 0.4);
    }

    #[test]
    fn deterministic_sequences() {
        let run = |seed| {
            let mut s = DecaySchedule::new(0.05, false, seeded(seed)).unwrap();
            (1..=100).map(|r| s.should_cluster(r).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(8), run(8));
        assert_ne!(run(8), run(9));
        assert!(count(8, 100, 0.05) >= 1);
    }

    proptest! {
        #[test]
        fn expected_count_is_nonincreasing_in_alpha(
            rounds in 1u64..300,
            a in 0.0f64..2.0,
            b in 0.0f64..2.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(expected_cluster_count(rounds, hi) <= expected_cluster_count(rounds, lo) + 1e-12);
        }
    }
}
