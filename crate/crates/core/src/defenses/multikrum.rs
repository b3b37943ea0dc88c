//! Multi-Krum selection over Euclidean distances.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::update::ClientUpdate;

use super::DefenseVerdict;

/// Iteratively select the `m` updates with the lowest Krum scores.
///
/// Each remaining update is scored by the sum of squared Euclidean
/// distances to its `n - f - 1` nearest remaining peers (`n` fixed at the
/// initial count); the minimum-score update moves to the candidate set
/// until `m` are chosen. Ties break toward the lower client id.
pub fn defend_multikrum<S: Scalar>(
    updates: &[ClientUpdate<S>],
    f: usize,
    m: usize,
) -> Result<DefenseVerdict> {
    let n = updates.len();
    if 2 * f + 2 > n {
        return Err(Error::DefensePrecondition(format!(
            "multi-krum needs 2f+2 <= n, got f={f}, n={n}"
        )));
    }
    if m == 0 || m > n {
        return Err(Error::DefensePrecondition(format!(
            "select count m={m} out of range for n={n}"
        )));
    }
    let closest = n - f - 1;

    let mut sq = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = updates[i]
                .delta
                .sub(&updates[j].delta)?
                .l2_norm()
                .as_f64()
                .powi(2);
            sq[i][j] = d;
            sq[j][i] = d;
        }
    }

    let mut remaining: Vec<usize> = (0..n).collect();
    let mut selected: Vec<usize> = Vec::with_capacity(m);
    let mut scores: BTreeMap<_, _> = BTreeMap::new();
    while selected.len() < m {
        let mut best: Option<(f64, usize)> = None;
        for &i in &remaining {
            let mut dists: Vec<f64> = remaining
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| sq[i][j])
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let score: f64 = dists.iter().take(closest).sum();
            scores.insert(updates[i].client_id, score);
            let better = match best {
                None => true,
                Some((bs, bi)) => {
                    score < bs
                        || (score == bs && updates[i].client_id < updates[bi].client_id)
                }
            };
            if better {
                best = Some((score, i));
            }
        }
        let (_, pick) = best.expect("remaining set is never empty before m picks");
        remaining.retain(|&x| x != pick);
        selected.push(pick);
    }

    let all: Vec<_> = updates.iter().map(|u| u.client_id).collect();
    let mut verdict = DefenseVerdict::partition(&all, |id| {
        !selected.iter().any(|&i| updates[i].client_id == id)
    });
    verdict.scores = scores;
    Ok(verdict)
}
