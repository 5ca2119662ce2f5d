//! Non-IID client partitions and heterogeneous device profiles.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::LearnerError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub beta: f64,
    pub n_clients: usize,
    pub samples_per_client: usize,
}

/// Client proportions `p ~ Dir(β·1)` from normalized `Gamma(β, 1)` draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(
    beta: f64,
    classes: usize,
    rng: &mut R,
) -> Result<Vec<f64>, LearnerError> {
    let gamma = Gamma::new(beta, 1.0).map_err(|e| LearnerError::Data(format!("Dir({beta}): {e}")))?;
    let draws: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        return Ok(draws.into_iter().map(|g| g / total).collect());
    }
    // every draw underflowed: all mass on one uniformly chosen class
    let mut p = vec![0.0; classes];
    p[rng.gen_range(0..classes)] = 1.0;
    Ok(p)
}

/// Integer counts summing to `total`, allotted by largest remainder
/// (ties to the lower class index).
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Per-client index lists drawn without replacement from shared class pools.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    labels: &[usize],
    num_classes: usize,
    config: &PartitionConfig,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, LearnerError> {
    if !(config.beta > 0.0) || !config.beta.is_finite() {
        return Err(LearnerError::Data(format!("Dirichlet concentration must be positive, got {}", config.beta)));
    }
    let needed = config.n_clients * config.samples_per_client;
    if needed > labels.len() {
        return Err(LearnerError::Data(format!(
            "{} clients × {} samples need {needed}, only {} available",
            config.n_clients,
            config.samples_per_client,
            labels.len()
        )));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(LearnerError::Data(format!("label {l} not below {num_classes}")));
        }
        pools[l].push(i);
    }

    let mut clients = Vec::with_capacity(config.n_clients);
    for _ in 0..config.n_clients {
        let p = sample_dirichlet(config.beta, num_classes, rng)?;
        let wanted = largest_remainder(&p, config.samples_per_client);
        let mut chosen = Vec::with_capacity(config.samples_per_client);
        for (class, &count) in wanted.iter().enumerate() {
            for _ in 0..count {
                let source = if pools[class].is_empty() {
                    most_populous(&pools)
                } else {
                    class
                };
                let pool = &mut pools[source];
                let pick = rng.gen_range(0..pool.len());
                chosen.push(pool.swap_remove(pick));
            }
        }
        clients.push(chosen);
    }
    Ok(clients)
}

fn most_populous(pools: &[Vec<usize>]) -> usize {
    let mut best = 0;
    for (k, pool) in pools.iter().enumerate() {
        if pool.len() > pools[best].len() {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// Simulated uplink factor `d ∈ [0.2, 1]`.
    pub uplink_factor: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(LearnerError::Data("local epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(LearnerError::InvalidRate(self.learning_rate));
        }
        Ok(())
    }
}

/// `E_i = max(1, round(d·E_m))`, rounding half away from zero.
pub fn epochs_for(uplink_factor: f64, max_epochs: usize) -> usize {
    ((uplink_factor * max_epochs as f64).round() as usize).clamp(1, max_epochs)
}

pub fn sample_device_profiles<R: Rng + ?Sized>(
    n_clients: usize,
    max_epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    rng: &mut R,
) -> Result<Vec<DeviceProfile>, LearnerError> {
    if max_epochs == 0 {
        return Err(LearnerError::Data("maximum local epochs must be at least 1".into()));
    }
    (0..n_clients)
        .map(|_| {
            let d = rng.gen_range(0.2..=1.0);
            let profile = DeviceProfile {
                uplink_factor: d,
                local_epochs: epochs_for(d, max_epochs),
                batch_size,
                learning_rate,
            };
            profile.validate().map(|()| profile)
        })
        .collect()
}
