//! RFLBAT: PCA projection, distance-sum outlier filtering, and k-means
//! cluster selection by intra-cluster cosine similarity.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::scalar::Scalar;
use crate::update::ClientUpdate;
use crate::ClientId;

use super::cluster::kmeans_2d;
use super::DefenseVerdict;

/// Three-round filter: (1) drop points whose pairwise-distance sum in the
/// 2-D PCA projection exceeds `eps1 x median`; (2) k-means the survivors
/// and keep the cluster with the highest mean intra-cluster cosine
/// similarity on the full-dimension deltas; (3) re-apply the distance
/// filter inside the winning cluster.
///
/// Zero-variance input (all updates identical) is degenerate for PCA and
/// accepts everything.
pub fn defend_rflbat<S: Scalar>(
    updates: &[ClientUpdate<S>],
    eps1: f64,
    k_clusters: usize,
    seed: u64,
) -> Result<DefenseVerdict> {
    let n = updates.len();
    if n < 3 {
        return Err(Error::DefensePrecondition(format!(
            "rflbat needs at least 3 updates, got {n}"
        )));
    }
    if eps1 <= 0.0 || k_clusters == 0 {
        return Err(Error::DefensePrecondition(format!(
            "bad parameters eps1={eps1}, k={k_clusters}"
        )));
    }
    let all: Vec<ClientId> = updates.iter().map(|u| u.client_id).collect();

    let coords = match pca_2d(updates) {
        Some(c) => c,
        None => {
            // Degenerate PCA: no variance, no signal.
            let mut verdict = DefenseVerdict::accept_all(all);
            verdict.scores = updates.iter().map(|u| (u.client_id, 0.0)).collect();
            return Ok(verdict);
        }
    };

    // Round 1: global distance-sum filter.
    let survivors = distance_filter(&coords, &(0..n).collect::<Vec<_>>(), eps1);
    let mut scores: BTreeMap<ClientId, f64> = BTreeMap::new();
    for (i, s) in distance_sums(&coords, &(0..n).collect::<Vec<_>>()) {
        scores.insert(updates[i].client_id, s);
    }

    // Round 2: cluster survivors, pick the most mutually-aligned cluster.
    let chosen: Vec<usize> = if survivors.len() <= k_clusters.max(2) {
        survivors.clone()
    } else {
        let pts: Vec<[f64; 2]> = survivors.iter().map(|&i| coords[i]).collect();
        let mut rng = CounterRng::derive(seed, &[0x4af1b47]);
        let labels = kmeans_2d(&pts, k_clusters, &mut rng);
        let mut best: Option<(f64, usize)> = None;
        for cluster in 0..k_clusters {
            let members: Vec<usize> = survivors
                .iter()
                .enumerate()
                .filter(|(pos, _)| labels[*pos] == cluster)
                .map(|(_, &i)| i)
                .collect();
            if members.is_empty() {
                continue;
            }
            let sim = mean_intra_cosine(updates, &members);
            let better = match best {
                None => true,
                Some((b, _)) => sim > b,
            };
            if better {
                best = Some((sim, cluster));
            }
        }
        let winner = best.map(|(_, c)| c).unwrap_or(0);
        survivors
            .iter()
            .enumerate()
            .filter(|(pos, _)| labels[*pos] == winner)
            .map(|(_, &i)| i)
            .collect()
    };

    // Round 3: distance filter inside the chosen cluster.
    let accepted_idx = distance_filter(&coords, &chosen, eps1);

    let mut verdict = DefenseVerdict::partition(&all, |id| {
        !accepted_idx.iter().any(|&i| updates[i].client_id == id)
    });
    verdict.scores = scores;
    Ok(verdict)
}

/// 2-D PCA coordinates via the Gram-matrix eigendecomposition (points are
/// few, dimensions many). Returns None when the total variance vanishes.
fn pca_2d<S: Scalar>(updates: &[ClientUpdate<S>]) -> Option<Vec<[f64; 2]>> {
    let n = updates.len();
    let d = updates[0].delta.len();
    let mut mean = vec![0.0f64; d];
    for u in updates {
        for (m, v) in mean.iter_mut().zip(&u.delta.values) {
            *m += v.as_f64() / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = updates
        .iter()
        .map(|u| {
            u.delta
                .values
                .iter()
                .zip(&mean)
                .map(|(v, m)| v.as_f64() - m)
                .collect()
        })
        .collect();
    let mut gram = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i..n {
            let g: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            gram[i][j] = g;
            gram[j][i] = g;
        }
    }
    let trace: f64 = (0..n).map(|i| gram[i][i]).sum();
    if trace <= 1e-18 {
        return None;
    }
    let (eigenvalues, eigenvectors) = jacobi_eigen(&gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap());
    let coord = |rank: usize, i: usize| -> f64 {
        let k = order[rank];
        let lambda = eigenvalues[k].max(0.0);
        lambda.sqrt() * eigenvectors[i][k]
    };
    Some((0..n).map(|i| [coord(0, i), if n > 1 { coord(1, i) } else { 0.0 }]).collect())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, column eigenvectors).
fn jacobi_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v = vec![vec![0.0f64; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p][q] * a[p][q];
            }
        }
        if off <= 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() <= 1e-30 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

fn distance_sums(coords: &[[f64; 2]], subset: &[usize]) -> Vec<(usize, f64)> {
    subset
        .iter()
        .map(|&i| {
            let s: f64 = subset
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| {
                    ((coords[i][0] - coords[j][0]).powi(2) + (coords[i][1] - coords[j][1]).powi(2))
                        .sqrt()
                })
                .sum();
            (i, s)
        })
        .collect()
}

/// Keep subset members whose distance sum is at most `eps1 x median`.
fn distance_filter(coords: &[[f64; 2]], subset: &[usize], eps1: f64) -> Vec<usize> {
    if subset.len() <= 2 {
        return subset.to_vec();
    }
    let sums = distance_sums(coords, subset);
    let mut values: Vec<f64> = sums.iter().map(|(_, s)| *s).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if values.len() % 2 == 1 {
        values[values.len() / 2]
    } else {
        0.5 * (values[values.len() / 2 - 1] + values[values.len() / 2])
    };
    sums.into_iter()
        .filter(|(_, s)| *s <= eps1 * median)
        .map(|(i, _)| i)
        .collect()
}

/// Mean pairwise cosine similarity of the full-dimension deltas; singleton
/// clusters score 0 (no pairs).
fn mean_intra_cosine<S: Scalar>(updates: &[ClientUpdate<S>], members: &[usize]) -> f64 {
    if members.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            total += updates[i].delta.cosine(&updates[j].delta);
            pairs += 1;
        }
    }
    total / pairs as f64
}
