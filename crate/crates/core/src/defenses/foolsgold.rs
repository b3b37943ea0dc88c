//! Foolsgold: cosine similarity of cumulative update histories with
//! pardoning and a logit re-weighting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::FlatVector;
use crate::scalar::Scalar;
use crate::update::ClientUpdate;
use crate::ClientId;

use super::DefenseVerdict;

/// Flag threshold: updates weighted below this count as detected.
pub const FOOLSGOLD_FLAG_THRESHOLD: f64 = 0.5;

/// Per-client cumulative sum of every delta the client ever uploaded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FoolsgoldHistory<S: Scalar> {
    pub cumulative: BTreeMap<ClientId, FlatVector<S>>,
}

impl<S: Scalar> FoolsgoldHistory<S> {
    /// Fold a new upload into the client's history.
    pub fn accumulate(&mut self, update: &ClientUpdate<S>) -> Result<()> {
        match self.cumulative.get_mut(&update.client_id) {
            Some(h) => h.add_assign_scaled(&update.delta, S::one()),
            None => {
                self.cumulative.insert(update.client_id, update.delta.clone());
                Ok(())
            }
        }
    }
}

/// Weight this round's updates by historical cosine similarity.
///
/// Pipeline: pairwise cosine of cumulative histories; pardoning
/// (`cs_ij *= max_j / max_i` when `max_i > max_j`); `w_i = 1 - max_j cs_ij`
/// clipped to [0,1]; rescale by the max; logit squash clamped back to
/// [0,1]. Clients below 0.5 are flagged; the weights ride along for
/// aggregation. Zero-norm histories keep weight 1.
pub fn defend_foolsgold<S: Scalar>(
    updates: &[ClientUpdate<S>],
    history: &FoolsgoldHistory<S>,
) -> Result<DefenseVerdict> {
    let n = updates.len();
    if n == 0 {
        return Err(Error::DefensePrecondition("no updates received".into()));
    }
    let vectors: Vec<&FlatVector<S>> = updates
        .iter()
        .map(|u| {
            history.cumulative.get(&u.client_id).ok_or_else(|| {
                Error::DefensePrecondition(format!(
                    "history missing client {} (accumulate before defending)",
                    u.client_id
                ))
            })
        })
        .collect::<Result<_>>()?;

    let mut cs = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                cs[i][j] = vectors[i].cosine(vectors[j]);
            }
        }
    }
    let row_max = |cs: &Vec<Vec<f64>>, i: usize| -> f64 {
        cs[i].iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v).fold(f64::MIN, f64::max)
    };
    let maxes: Vec<f64> = (0..n).map(|i| row_max(&cs, i)).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && maxes[i] > maxes[j] && maxes[i] > 0.0 {
                cs[i][j] *= maxes[j] / maxes[i];
            }
        }
    }

    let mut wv: Vec<f64> = (0..n)
        .map(|i| (1.0 - row_max(&cs, i)).clamp(0.0, 1.0))
        .collect();
    let top = wv.iter().cloned().fold(0.0, f64::max);
    if top > 0.0 {
        for w in &mut wv {
            *w /= top;
        }
    }
    for w in &mut wv {
        if *w == 1.0 {
            *w = 0.99;
        }
        // Logit rescale, clamped back into [0, 1].
        *w = (*w / (1.0 - *w)).ln() + 0.5;
        if !w.is_finite() || *w > 1.0 {
            *w = if *w == f64::NEG_INFINITY { 0.0 } else { 1.0 };
        }
        if *w < 0.0 {
            *w = 0.0;
        }
    }

    let all: Vec<ClientId> = updates.iter().map(|u| u.client_id).collect();
    let mut verdict = DefenseVerdict::partition(&all, |id| {
        let idx = updates.iter().position(|u| u.client_id == id).unwrap();
        wv[idx] < FOOLSGOLD_FLAG_THRESHOLD
    });
    for (i, u) in updates.iter().enumerate() {
        verdict.scores.insert(u.client_id, wv[i]);
        if wv[i] >= FOOLSGOLD_FLAG_THRESHOLD {
            verdict.weights.insert(u.client_id, wv[i]);
        }
    }
    Ok(verdict)
}
