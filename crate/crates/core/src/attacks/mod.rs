//! Malicious client behaviors: the backdoor training algorithms,
//! model-replacement scaling, and DBA trigger decomposition.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PixelSpec, TriggerPattern, TriggerSpec};
use crate::error::{Error, Result};
use crate::nn::{
    backward_from_features, flatten, forward_train, sgd_step_filtered, supcon_loss_grad,
    unflatten, FlatVector, ModelState,
};
use crate::rng::{purpose, CounterRng};
use crate::scalar::{c, Scalar};
use crate::train::{full_batch_gradient, run_sgd, run_sgd_prox, sample_batch};
use crate::update::ClientUpdate;
use crate::ClientId;

/// Benign pre-training stage of the adaptive attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    // 10 benign iterations at 0.05 before poisoning at the configured plr.
    fn default() -> Self {
        PretrainConfig { iterations: 10, lr: 0.05 }
    }
}

/// Static hyper-parameters of the constrained-loss / noise-mask / decoy attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreeDFedConfig {
    /// Weight of the `|w - G|_2` constraint added to the task loss.
    pub lambda_c: f64,
    /// Standard deviation of the zero-sum noise masks.
    pub noise_scale: f64,
    /// How many cohort members upload benign-style decoys instead of
    /// backdoor models.
    pub decoy_count: usize,
}

impl Default for ThreeDFedConfig {
    fn default() -> Self {
        ThreeDFedConfig { lambda_c: 0.1, noise_scale: 0.01, decoy_count: 0 }
    }
}

/// Clients the attacker controls in one round, plus the seed all cohort-level
/// randomness (noise masks, per-member training streams) derives from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaliciousCohort {
    pub client_ids: Vec<ClientId>,
    pub seed: u64,
}

/// Mini-batch SGD on the mixed (benign + triggered) dataset.
pub fn train_vanilla<S: Scalar>(
    start: &ModelState<S>,
    poisoned: &Dataset<S>,
    plr: f64,
    iters: usize,
    batch: usize,
    rng: &mut CounterRng,
) -> Result<ModelState<S>> {
    let mut state = start.clone();
    run_sgd(&mut state, poisoned, plr, iters, batch, rng)?;
    Ok(state)
}

/// SGD where every iteration is projected onto an l2 ball of the given
/// radius around the previous iteration's parameters. `f64::INFINITY`
/// disables the constraint.
pub fn train_pgd<S: Scalar>(
    start: &ModelState<S>,
    poisoned: &Dataset<S>,
    plr: f64,
    iters: usize,
    batch: usize,
    radius: f64,
    rng: &mut CounterRng,
) -> Result<ModelState<S>> {
    if radius <= 0.0 {
        return Err(Error::InvalidArgument {
            name: "pgd_radius",
            reason: "must be positive".into(),
        });
    }
    let mut state = start.clone();
    for _ in 0..iters {
        let anchor = flatten(&state);
        run_sgd(&mut state, poisoned, plr, 1, batch, rng)?;
        if radius.is_finite() {
            project_to_ball(&mut state, &anchor, radius)?;
        }
    }
    Ok(state)
}

/// Rescale `state - anchor` to the ball radius when it sticks out.
fn project_to_ball<S: Scalar>(
    state: &mut ModelState<S>,
    anchor: &FlatVector<S>,
    radius: f64,
) -> Result<()> {
    let current = flatten(state);
    let mut dev = current.sub(anchor)?;
    let norm = dev.l2_norm().as_f64();
    if norm > radius {
        dev.scale(c::<S>(radius / norm));
        let projected = anchor.add(&dev)?;
        state.params = unflatten(&projected, &state.arch)?;
    }
    Ok(())
}

/// Freeze the top-k fraction of coordinates by benign-gradient magnitude
/// (computed once at start) and train the rest on the poisoned data.
///
/// The frozen set has exactly `round(k * d)` coordinates; ties break by
/// (magnitude desc, coordinate index asc). Frozen coordinates end the run
/// bit-identical to `start`.
pub fn train_neurotoxin<S: Scalar>(
    start: &ModelState<S>,
    poisoned: &Dataset<S>,
    benign: &Dataset<S>,
    plr: f64,
    iters: usize,
    batch: usize,
    k: f64,
    rng: &mut CounterRng,
) -> Result<ModelState<S>> {
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::InvalidArgument {
            name: "neurotoxin_k",
            reason: format!("{k} outside (0, 1)"),
        });
    }
    let benign_grad = full_batch_gradient(start, benign)?;
    let mut flat_mag = Vec::new();
    for tensors in &benign_grad.per_layer {
        for t in tensors {
            flat_mag.extend(t.values().iter().map(|v| v.abs().as_f64()));
        }
    }
    let frozen = top_k_indices(&flat_mag, k);

    let start_flat = flatten(start);
    let mut state = start.clone();
    for _ in 0..iters {
        run_sgd(&mut state, poisoned, plr, 1, batch, rng)?;
        let mut current = flatten(&state);
        for &i in &frozen {
            current.values[i] = start_flat.values[i];
        }
        state.params = unflatten(&current, &state.arch)?;
    }
    Ok(state)
}

/// Indices of the `round(k * len)` largest magnitudes, ties by lower index.
pub fn top_k_indices(magnitudes: &[f64], k: f64) -> Vec<usize> {
    let count = ((k * magnitudes.len() as f64).round() as usize).min(magnitudes.len());
    let mut order: Vec<usize> = (0..magnitudes.len()).collect();
    order.sort_by(|&a, &b| {
        magnitudes[b]
            .partial_cmp(&magnitudes[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut picked = order[..count].to_vec();
    picked.sort_unstable();
    picked
}

/// Contrastive temperature used by the two-stage attack.
pub const CHAMELEON_TAU: f64 = 0.1;

/// Two-stage training: supervised contrastive loss adapts the encoder
/// (everything below the final dense layer), then cross-entropy trains the
/// classifier with the encoder bit-frozen.
pub fn train_chameleon<S: Scalar>(
    start: &ModelState<S>,
    poisoned: &Dataset<S>,
    plr: f64,
    iters: usize,
    batch: usize,
    rng: &mut CounterRng,
) -> Result<ModelState<S>> {
    let after_encoder = chameleon_stage1(start, poisoned, plr, iters, batch, rng)?;
    chameleon_stage2(&after_encoder, poisoned, plr, iters, batch, rng)
}

/// Stage 1: contrastive training of the encoder; the classifier (final
/// dense layer) is untouched.
pub fn chameleon_stage1<S: Scalar>(
    start: &ModelState<S>,
    poisoned: &Dataset<S>,
    plr: f64,
    iters: usize,
    batch: usize,
    rng: &mut CounterRng,
) -> Result<ModelState<S>> {
    let classifier = classifier_layer(start)?;
    let mut state = start.clone();
    let tau = c::<S>(CHAMELEON_TAU);
    for _ in 0..iters {
        let indices = sample_batch(rng, poisoned.len(), batch.max(2));
        let (x, labels) = poisoned.batch(&indices)?;
        let (_, cache) = forward_train(&mut state, &x)?;
        let features = cache
            .dense_input(classifier)
            .ok_or_else(|| Error::CacheMismatch("no penultimate features cached".into()))?
            .clone();
        let (_, dfeat) = supcon_loss_grad(&features, &labels, tau)?;
        let grads = backward_from_features(&state, &cache, dfeat)?;
        sgd_step_filtered(&mut state, &grads, c::<S>(plr), |l| l != classifier)?;
    }
    Ok(state)
}

/// Stage 2: cross-entropy on the classifier only; encoder learnables stay
/// bit-identical (running BN statistics still track the training batches).
pub fn chameleon_stage2<S: Scalar>(
    start: &ModelState<S>,
    poisoned: &Dataset<S>,
    plr: f64,
    iters: usize,
    batch: usize,
    rng: &mut CounterRng,
) -> Result<ModelState<S>> {
    let classifier = classifier_layer(start)?;
    let mut state = start.clone();
    for _ in 0..iters {
        let indices = sample_batch(rng, poisoned.len(), batch.max(2));
        let (x, labels) = poisoned.batch(&indices)?;
        let (_, cache) = forward_train(&mut state, &x)?;
        let grads = crate::nn::backward(&state, &cache, &labels)?;
        sgd_step_filtered(&mut state, &grads, c::<S>(plr), |l| l == classifier)?;
    }
    Ok(state)
}

fn classifier_layer<S: Scalar>(state: &ModelState<S>) -> Result<usize> {
    state.arch.final_dense_layer().ok_or(Error::InvalidArgument {
        name: "arch",
        reason: "chameleon needs a dense final layer as the classifier".into(),
    })
}

/// Constrained-loss backdoor training with zero-sum noise masks and
/// benign-style decoys.
///
/// The first `cohort.len() - decoy_count` members upload backdoor models
/// trained with the `lambda_c * |w - G|_2` constraint plus a noise mask;
/// the masks sum to the zero vector exactly. The remaining members upload
/// decoys trained on benign data only.
pub fn train_3dfed<S: Scalar>(
    cohort: &MaliciousCohort,
    start: &ModelState<S>,
    poisoned: &Dataset<S>,
    benign: &Dataset<S>,
    cfg: &ThreeDFedConfig,
    plr: f64,
    iters: usize,
    batch: usize,
) -> Result<Vec<ClientUpdate<S>>> {
    let total = cohort.client_ids.len();
    if total == 0 {
        return Err(Error::InvalidArgument {
            name: "cohort",
            reason: "cohort is empty".into(),
        });
    }
    if cfg.decoy_count >= total {
        return Err(Error::InvalidArgument {
            name: "decoy_count",
            reason: format!("{} decoys leave no backdoor member of {total}", cfg.decoy_count),
        });
    }
    let real = total - cfg.decoy_count;
    if real == 1 && cfg.noise_scale > 0.0 {
        // A single backdoor member cannot carry nonzero zero-sum noise.
        log::warn!("3dfed: single backdoor member forces the noise mask to zero");
    }
    let anchor = flatten(start);
    let masks = zero_sum_masks::<S>(real, anchor.len(), cfg.noise_scale, cohort.seed);

    let mut updates = Vec::with_capacity(total);
    for (pos, &client_id) in cohort.client_ids.iter().enumerate() {
        let mut rng = CounterRng::derive(cohort.seed, &[purpose::ATTACK, client_id as u64]);
        if pos < real {
            let mut state = start.clone();
            run_sgd_prox(&mut state, poisoned, plr, iters, batch, cfg.lambda_c, &anchor, &mut rng)?;
            let mut update = ClientUpdate::from_training(client_id, start, &state)?;
            for (d, m) in update.delta.values.iter_mut().zip(&masks[pos]) {
                *d += *m;
            }
            updates.push(update);
        } else {
            let mut state = start.clone();
            run_sgd(&mut state, benign, plr, iters, batch, &mut rng)?;
            updates.push(ClientUpdate::from_training(client_id, start, &state)?);
        }
    }
    Ok(updates)
}

/// Noise masks that sum to the zero vector exactly: the last mask is the
/// negated left-to-right sum of the others.
pub fn zero_sum_masks<S: Scalar>(count: usize, dim: usize, scale: f64, seed: u64) -> Vec<Vec<S>> {
    if count == 1 || scale == 0.0 {
        return vec![vec![S::zero(); dim]; count];
    }
    let mut rng = CounterRng::derive(seed, &[purpose::ATTACK, 0x6d61736b]);
    let mut masks: Vec<Vec<S>> = (0..count - 1)
        .map(|_| (0..dim).map(|_| c::<S>(rng.next_gaussian() * scale)).collect())
        .collect();
    let mut last = vec![S::zero(); dim];
    for d in 0..dim {
        let mut acc = S::zero();
        for m in &masks {
            acc += m[d];
        }
        last[d] = -acc;
    }
    masks.push(last);
    masks
}

/// Model-replacement scaling: every delta coordinate times `gamma`
/// (callers keep `gamma >= 1`); BN statistics ride along untouched.
pub fn scale_update<S: Scalar>(update: &ClientUpdate<S>, gamma: f64) -> ClientUpdate<S> {
    let mut scaled = update.clone();
    scaled.delta.scale(c::<S>(gamma));
    scaled
}

/// Benign pre-training to erase the indicator task, then vanilla backdoor
/// training at the poisoned learning rate.
pub fn adaptive_attack<S: Scalar>(
    start: &ModelState<S>,
    benign: &Dataset<S>,
    poisoned: &Dataset<S>,
    pretrain: &PretrainConfig,
    plr: f64,
    iters: usize,
    batch: usize,
    rng: &mut CounterRng,
) -> Result<ModelState<S>> {
    let mut state = start.clone();
    run_sgd(&mut state, benign, pretrain.lr, pretrain.iterations, batch, rng)?;
    run_sgd(&mut state, poisoned, plr, iters, batch, rng)?;
    Ok(state)
}

/// Round-robin decomposition of a global pixel pattern: pixel `i` goes to
/// part `i % cohort_size`. Parts are disjoint and their union is the parent.
pub fn assign_dba_parts<S: Scalar>(
    cohort_size: usize,
    parent: &[PixelSpec],
    target_label: usize,
) -> Result<Vec<TriggerSpec<S>>> {
    if cohort_size == 0 {
        return Err(Error::InvalidArgument {
            name: "cohort",
            reason: "cohort is empty".into(),
        });
    }
    Ok((0..cohort_size)
        .map(|part_index| TriggerSpec {
            pattern: TriggerPattern::DbaLocal {
                parent: parent.to_vec(),
                part_index,
                part_count: cohort_size,
            },
            target_label,
        })
        .collect())
}
