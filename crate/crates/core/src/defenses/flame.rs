//! FLAME: majority clustering on cosine distances, median-norm clipping,
//! and calibrated Gaussian noise.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::update::ClientUpdate;
use crate::ClientId;

use super::cluster::{cosine_distance_matrix, gap_cut_clusters};
use super::{DefenseVerdict, PostProcessing};

/// Noise calibration `(m / eps) * sqrt(2 ln(1.25 / delta))`.
pub fn flame_noise_sigma(median_norm: f64, eps: f64, delta: f64) -> f64 {
    median_norm / eps * (2.0 * (1.25 / delta).ln()).sqrt()
}

/// Density clustering over pairwise cosine distances with minimum cluster
/// size `n/2 + 1`; the largest qualifying cluster is accepted. Accepted
/// deltas are clipped to their median norm and the aggregate receives
/// Gaussian noise at the calibrated sigma.
///
/// When no cluster reaches the minimum size the fallback accepts the
/// `n/2 + 1` updates with the highest mean cosine similarity to the rest.
pub fn defend_flame<S: Scalar>(
    updates: &[ClientUpdate<S>],
    eps_dp: f64,
    delta_dp: f64,
) -> Result<DefenseVerdict> {
    let n = updates.len();
    if n < 3 {
        return Err(Error::DefensePrecondition(format!(
            "flame needs at least 3 updates, got {n}"
        )));
    }
    if eps_dp <= 0.0 || !(delta_dp > 0.0 && delta_dp < 1.0) {
        return Err(Error::DefensePrecondition(format!(
            "bad privacy budget eps={eps_dp}, delta={delta_dp}"
        )));
    }
    let min_size = n / 2 + 1;
    let deltas: Vec<_> = updates.iter().map(|u| &u.delta).collect();
    let dist = cosine_distance_matrix(&deltas);
    let labels = gap_cut_clusters(&dist);

    let cluster_count = labels.iter().max().map_or(1, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cluster_count];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let accepted_idx: Vec<usize> = match members
        .iter()
        .filter(|c| c.len() >= min_size)
        .max_by_key(|c| (c.len(), std::cmp::Reverse(c[0])))
    {
        Some(cluster) => cluster.clone(),
        None => {
            // Fallback: the min_size most centrally-similar updates.
            let mut mean_cos: Vec<(usize, f64)> = (0..n)
                .map(|i| {
                    let total: f64 = (0..n).filter(|&j| j != i).map(|j| 1.0 - dist[i][j]).sum();
                    (i, total / (n - 1) as f64)
                })
                .collect();
            mean_cos.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            mean_cos.into_iter().take(min_size).map(|(i, _)| i).collect()
        }
    };

    let mut norms: Vec<f64> = accepted_idx
        .iter()
        .map(|&i| updates[i].delta.l2_norm().as_f64())
        .collect();
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = median_of_sorted(&norms);

    let all: Vec<ClientId> = updates.iter().map(|u| u.client_id).collect();
    let mut verdict = DefenseVerdict::partition(&all, |id| {
        !accepted_idx.iter().any(|&i| updates[i].client_id == id)
    });
    let scores: BTreeMap<ClientId, f64> = (0..n)
        .map(|i| {
            let mean_d: f64 =
                (0..n).filter(|&j| j != i).map(|j| dist[i][j]).sum::<f64>() / (n - 1) as f64;
            (updates[i].client_id, mean_d)
        })
        .collect();
    verdict.scores = scores;
    verdict.post_processing = Some(PostProcessing {
        clip_bound: median,
        noise_sigma: flame_noise_sigma(median, eps_dp, delta_dp),
    });
    Ok(verdict)
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}
