//! Server-side update filtering: robust-aggregation baselines, norm
//! clipping, and the OOD-indicator detection protocol.

mod cluster;
mod deepsight;
mod flame;
mod foolsgold;
mod indicator;
mod multikrum;
mod rflbat;

pub use cluster::{cosine_distance_matrix, gap_cut_clusters, kmeans_2d};
pub use deepsight::defend_deepsight;
pub use flame::{defend_flame, flame_noise_sigma};
pub use foolsgold::{defend_foolsgold, FoolsgoldHistory};
pub use indicator::{indicator_accuracy, indicator_inject, indicator_inspect, IndicatorState};
pub use multikrum::defend_multikrum;
pub use rflbat::defend_rflbat;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{apply_delta, BnStats, FlatVector, ModelState};
use crate::rng::CounterRng;
use crate::scalar::{c, Scalar};
use crate::update::ClientUpdate;
use crate::ClientId;

/// Post-aggregation steps a defense asks the engine to apply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostProcessing {
    /// Clip every accepted delta to this l2 norm before averaging.
    pub clip_bound: f64,
    /// Std-dev of i.i.d. Gaussian noise added to the aggregate (0 disables).
    pub noise_sigma: f64,
}

/// Outcome of one defense pass over the received updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseVerdict {
    pub accepted: Vec<ClientId>,
    pub flagged: Vec<ClientId>,
    /// Defense-specific per-client score (distances, weights, indicator
    /// accuracy, ...).
    pub scores: BTreeMap<ClientId, f64>,
    /// Indicator only: arg-max label, the inferred backdoor target.
    pub inferred_targets: BTreeMap<ClientId, usize>,
    /// Foolsgold only: aggregation weight per accepted client.
    pub weights: BTreeMap<ClientId, f64>,
    pub post_processing: Option<PostProcessing>,
}

impl DefenseVerdict {
    /// Build a verdict accepting everything.
    pub fn accept_all(ids: impl IntoIterator<Item = ClientId>) -> Self {
        let mut accepted: Vec<ClientId> = ids.into_iter().collect();
        accepted.sort_unstable();
        DefenseVerdict {
            accepted,
            flagged: Vec::new(),
            scores: BTreeMap::new(),
            inferred_targets: BTreeMap::new(),
            weights: BTreeMap::new(),
            post_processing: None,
        }
    }

    /// Partition `all` into accepted/flagged by a predicate on the id.
    pub fn partition(all: &[ClientId], flag: impl Fn(ClientId) -> bool) -> Self {
        let mut accepted = Vec::new();
        let mut flagged = Vec::new();
        for &id in all {
            if flag(id) {
                flagged.push(id);
            } else {
                accepted.push(id);
            }
        }
        accepted.sort_unstable();
        flagged.sort_unstable();
        DefenseVerdict {
            accepted,
            flagged,
            scores: BTreeMap::new(),
            inferred_targets: BTreeMap::new(),
            weights: BTreeMap::new(),
            post_processing: None,
        }
    }

    /// Accepted and flagged must partition the received id set.
    pub fn check_partition(&self, all: &[ClientId]) -> Result<()> {
        let mut union: Vec<ClientId> = self.accepted.iter().chain(&self.flagged).copied().collect();
        union.sort_unstable();
        let mut expect = all.to_vec();
        expect.sort_unstable();
        if union != expect {
            return Err(Error::DefensePrecondition(
                "verdict does not partition the received updates".into(),
            ));
        }
        Ok(())
    }
}

/// Rescale every delta whose l2 norm exceeds `bound` down to `bound`.
/// An idempotent projection; untouched updates are returned bit-identical.
pub fn norm_clip<S: Scalar>(updates: &[ClientUpdate<S>], bound: f64) -> Result<Vec<ClientUpdate<S>>> {
    if bound <= 0.0 {
        return Err(Error::InvalidArgument {
            name: "bound",
            reason: "clip bound must be positive".into(),
        });
    }
    Ok(updates
        .iter()
        .map(|u| {
            let norm = u.delta.l2_norm().as_f64();
            if norm > bound {
                let mut clipped = u.clone();
                clipped.delta.scale(c::<S>(bound / norm));
                clipped
            } else {
                u.clone()
            }
        })
        .collect())
}

/// `G_next = w_ind + (1/|A|) sum of accepted deltas`, with the verdict's
/// clip/noise post-processing applied by this engine step. The next global
/// BN statistics are the element-wise mean of the accepted clients'
/// uploaded statistics; with no acceptances the broadcast model is kept.
pub fn aggregate_accepted<S: Scalar>(
    w_ind: &ModelState<S>,
    updates: &[ClientUpdate<S>],
    verdict: &DefenseVerdict,
    mut noise_rng: Option<&mut CounterRng>,
) -> Result<ModelState<S>> {
    if verdict.accepted.is_empty() {
        log::info!("no accepted updates; keeping the broadcast model");
        return Ok(w_ind.clone());
    }
    let by_id: BTreeMap<ClientId, &ClientUpdate<S>> =
        updates.iter().map(|u| (u.client_id, u)).collect();

    let mut mean = FlatVector::zeros(crate::nn::Layout::of(&w_ind.arch));
    let inv = c::<S>(1.0 / verdict.accepted.len() as f64);
    let mut accepted_stats: Vec<&BnStats<S>> = Vec::with_capacity(verdict.accepted.len());
    for id in &verdict.accepted {
        let update = by_id.get(id).ok_or_else(|| {
            Error::DefensePrecondition(format!("verdict accepts unknown client {id}"))
        })?;
        let mut delta = update.delta.clone();
        if let Some(pp) = &verdict.post_processing {
            let norm = delta.l2_norm().as_f64();
            if norm > pp.clip_bound {
                delta.scale(c::<S>(pp.clip_bound / norm));
            }
        }
        if let Some(w) = verdict.weights.get(id) {
            delta.scale(c::<S>(*w));
        }
        mean.add_assign_scaled(&delta, inv)?;
        accepted_stats.push(&update.uploaded_bn_stats);
    }

    if let Some(pp) = &verdict.post_processing {
        if pp.noise_sigma > 0.0 {
            let rng = noise_rng.as_deref_mut().ok_or(Error::InvalidArgument {
                name: "noise_rng",
                reason: "post-processing noise requires an RNG stream".into(),
            })?;
            for v in &mut mean.values {
                *v += c::<S>(rng.next_gaussian() * pp.noise_sigma);
            }
        }
    }

    let mut next = apply_delta(w_ind, &mean)?;
    if let Some(stats) = BnStats::mean_of(&accepted_stats) {
        next.set_bn_stats(stats)?;
    }
    Ok(next)
}
