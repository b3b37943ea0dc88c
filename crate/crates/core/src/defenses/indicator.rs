//! Proactive indicator defense: inject an OOD classification task into the
//! global model before broadcast, then flag uploads that still solve it.
//!
//! The server saves the global BN statistics, trains the indicator task
//! (cross-entropy plus an l2 pull toward the global model), saves the
//! post-training BN statistics, and broadcasts the trained model with the
//! original statistics restored. Inspection reconstructs each upload,
//! swaps the indicator statistics back in, and reads the maximum
//! per-assigned-label accuracy on the secret dataset: benign training makes
//! the model forget the OOD task, backdoor training keeps it alive.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::IndicatorDataset;
use crate::error::{Error, Result};
use crate::nn::{apply_delta, BnStats, ModelState};
use crate::rng::CounterRng;
use crate::scalar::Scalar;
use crate::train::{per_label_accuracy, run_sgd_prox};
use crate::update::ClientUpdate;

use super::DefenseVerdict;

/// Server-held secret produced by [`indicator_inject`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct IndicatorState<S: Scalar> {
    pub dataset: IndicatorDataset<S>,
    /// Global-model statistics (mu_M, sigma_M), restored before broadcast.
    pub main_stats: BnStats<S>,
    /// Post-injection statistics (mu_I, sigma_I), used at inspection.
    pub indicator_stats: BnStats<S>,
    /// Suspicion threshold in [0, 100]; alpha_m at or above it flags.
    pub epsilon_i: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub lr: f64,
    /// The broadcast model `w_ind`.
    pub broadcast: ModelState<S>,
}

/// Train the indicator task into the global model and prepare the broadcast.
pub fn indicator_inject<S: Scalar>(
    global: &ModelState<S>,
    dataset: &IndicatorDataset<S>,
    lambda: f64,
    iterations: usize,
    lr: f64,
    batch: usize,
    epsilon_i: f64,
    rng: &mut CounterRng,
) -> Result<(ModelState<S>, IndicatorState<S>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("indicator dataset is empty".into()));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidArgument {
            name: "lambda",
            reason: "regularization weight must be non-negative".into(),
        });
    }
    if iterations == 0 {
        return Err(Error::InvalidArgument {
            name: "iterations",
            reason: "indicator training needs at least 1 iteration".into(),
        });
    }
    if !(0.0..=100.0).contains(&epsilon_i) {
        return Err(Error::InvalidArgument {
            name: "epsilon_i",
            reason: format!("{epsilon_i} outside [0, 100]"),
        });
    }
    let main_stats = global.get_bn_stats();
    let train_ds = dataset.as_training_dataset()?;
    let anchor = crate::nn::flatten(global);
    let mut model = global.clone();
    run_sgd_prox(&mut model, &train_ds, lr, iterations, batch, lambda, &anchor, rng)?;
    let indicator_stats = model.get_bn_stats();
    model.set_bn_stats(main_stats.clone())?;
    let state = IndicatorState {
        dataset: dataset.clone(),
        main_stats,
        indicator_stats,
        epsilon_i,
        lambda,
        iterations,
        lr,
        broadcast: model.clone(),
    };
    Ok((model, state))
}

/// Per-assigned-label indicator accuracies of a model evaluated under the
/// indicator BN statistics. Returns `(alpha array, alpha_m, argmax label)`;
/// labels with no samples score 0, ties resolve to the lower label.
pub fn indicator_accuracy<S: Scalar>(
    state: &IndicatorState<S>,
    model: &ModelState<S>,
) -> Result<(Vec<f64>, f64, usize)> {
    let mut probe = model.clone();
    probe.set_bn_stats(state.indicator_stats.clone())?;
    let samples: Vec<_> = state
        .dataset
        .samples
        .iter()
        .map(|(x, assigned, _)| (x.clone(), *assigned))
        .collect();
    let alphas = per_label_accuracy(&probe, &samples, state.dataset.num_benign_classes)?;
    let (label, alpha_m) = alphas
        .iter()
        .enumerate()
        .fold((0usize, f64::MIN), |(bl, bv), (l, &v)| {
            if v > bv {
                (l, v)
            } else {
                (bl, bv)
            }
        });
    Ok((alphas, alpha_m, label))
}

/// Reconstruct each upload, correct the BN shift, and flag any model whose
/// maximum per-label indicator accuracy reaches the suspicion threshold.
/// Stored updates and the broadcast model are never mutated.
pub fn indicator_inspect<S: Scalar>(
    state: &IndicatorState<S>,
    updates: &[ClientUpdate<S>],
) -> Result<DefenseVerdict> {
    let inspected: Vec<(crate::ClientId, f64, usize)> = updates
        .par_iter()
        .map(|u| {
            let local = apply_delta(&state.broadcast, &u.delta)?;
            let (_, alpha_m, label) = indicator_accuracy(state, &local)?;
            Ok((u.client_id, alpha_m, label))
        })
        .collect::<Result<_>>()?;

    let all: Vec<_> = updates.iter().map(|u| u.client_id).collect();
    let mut verdict = DefenseVerdict::partition(&all, |id| {
        inspected
            .iter()
            .any(|(cid, alpha_m, _)| *cid == id && *alpha_m >= state.epsilon_i)
    });
    for (id, alpha_m, label) in inspected {
        verdict.scores.insert(id, alpha_m);
        verdict.inferred_targets.insert(id, label);
    }
    Ok(verdict)
}
