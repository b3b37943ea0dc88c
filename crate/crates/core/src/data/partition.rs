//! Dirichlet non-IID partitioning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, CounterRng};
use crate::scalar::Scalar;

use super::Dataset;

const REDRAW_BUDGET: usize = 100;

/// Disjoint cover of a dataset's indices across clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn total_assigned(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }
}

/// Split every class's indices across `num_clients` clients with
/// Dirichlet(alpha) proportions. Empty clients trigger a bounded re-draw.
pub fn dirichlet_partition<S: Scalar>(
    ds: &Dataset<S>,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if num_clients == 0 {
        return Err(Error::InvalidArgument {
            name: "num_clients",
            reason: "must be at least 1".into(),
        });
    }
    if alpha <= 0.0 {
        return Err(Error::InvalidArgument {
            name: "alpha",
            reason: "Dirichlet concentration must be positive".into(),
        });
    }
    if ds.len() < num_clients {
        return Err(Error::InvalidArgument {
            name: "num_clients",
            reason: format!("{} samples cannot cover {num_clients} clients", ds.len()),
        });
    }
    let by_class = ds.indices_by_class();
    let mut rng = CounterRng::derive(seed, &[purpose::PARTITION]);
    for _attempt in 0..REDRAW_BUDGET {
        let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
        for class_indices in &by_class {
            if class_indices.is_empty() {
                continue;
            }
            let mut pool = class_indices.clone();
            rng.shuffle(&mut pool);
            let proportions = rng.next_dirichlet(alpha, num_clients);
            let counts = largest_remainder_counts(&proportions, pool.len());
            let mut cursor = 0usize;
            for (client, count) in counts.into_iter().enumerate() {
                assignments[client].extend_from_slice(&pool[cursor..cursor + count]);
                cursor += count;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            for a in &mut assignments {
                a.sort_unstable();
            }
            return Ok(PartitionPlan { assignments, alpha, seed });
        }
    }
    Err(Error::PartitionRedrawExhausted(REDRAW_BUDGET))
}

/// Integer apportionment of `total` by `proportions` (largest remainder,
/// ties broken by lower index).
fn largest_remainder_counts(proportions: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = proportions
        .iter()
        .map(|p| (p * total as f64).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = proportions
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p * total as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in remainders.into_iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}
