//! Deepsight: division differences and normalized update energies over the
//! output layer, clustered with a suspicious-fraction acceptance rule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{apply_delta, forward_eval, ModelState};
use crate::rng::CounterRng;
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;
use crate::update::ClientUpdate;
use crate::ClientId;

use super::cluster::gap_cut_clusters;
use super::{DefenseVerdict, PostProcessing};

/// Number of random-noise probe inputs for the division differences.
pub const DEEPSIGHT_PROBES: usize = 256;

/// Accept a cluster only while its suspicious fraction stays below this.
const SUSPICIOUS_FRACTION: f64 = 1.0 / 3.0;

/// Classify updates by probe-response ratios (DDifs), output-layer update
/// energies (NEUPs), and pairwise cosine, then accept clusters that are
/// mostly unsuspicious. `clip` additionally bounds accepted deltas at the
/// median norm.
pub fn defend_deepsight<S: Scalar>(
    updates: &[ClientUpdate<S>],
    global: &ModelState<S>,
    tau_c: f64,
    clip: bool,
    probe_seed: u64,
) -> Result<DefenseVerdict> {
    let n = updates.len();
    if n == 0 {
        return Err(Error::DefensePrecondition("no updates received".into()));
    }
    let classes = global.arch.num_classes;
    let final_dense = global.arch.final_dense_layer().ok_or_else(|| {
        Error::DefensePrecondition("deepsight needs a dense output layer".into())
    })?;

    // Probe batch of uniform noise shaped like the model input.
    let mut rng = CounterRng::derive(probe_seed, &[0xdd1f]);
    let mut probe_shape = vec![DEEPSIGHT_PROBES];
    probe_shape.extend_from_slice(&global.arch.input_shape);
    let probe_len: usize = probe_shape.iter().product();
    let probes = Tensor::from_parts(
        probe_shape,
        (0..probe_len).map(|_| c::<S>(rng.next_f64())).collect(),
    );
    let global_probs = softmax_rows(&forward_eval(global, &probes)?);

    let mut ddifs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut neups: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut te: Vec<usize> = Vec::with_capacity(n);
    for update in updates {
        let mut local = apply_delta(global, &update.delta)?;
        local.set_bn_stats(update.uploaded_bn_stats.clone())?;
        let local_probs = softmax_rows(&forward_eval(&local, &probes)?);

        // DDif: mean per-class ratio of local to global predicted scores.
        let mut ddif = vec![0.0f64; classes];
        for row in 0..DEEPSIGHT_PROBES {
            for k in 0..classes {
                ddif[k] += local_probs[row * classes + k] / (global_probs[row * classes + k] + 1e-12);
            }
        }
        for v in &mut ddif {
            *v /= DEEPSIGHT_PROBES as f64;
        }

        // NEUP: squared per-neuron energy of the output-layer update.
        let w = update
            .delta
            .tensor_slice(final_dense, 0)
            .ok_or_else(|| Error::DefensePrecondition("missing output-layer weights".into()))?;
        let b = update
            .delta
            .tensor_slice(final_dense, 1)
            .ok_or_else(|| Error::DefensePrecondition("missing output-layer bias".into()))?;
        let in_features = w.len() / classes;
        let mut energy: Vec<f64> = (0..classes)
            .map(|k| {
                let row: f64 = w[k * in_features..(k + 1) * in_features]
                    .iter()
                    .map(|v| v.abs().as_f64())
                    .sum();
                (row + b[k].abs().as_f64()).powi(2)
            })
            .collect();
        let total: f64 = energy.iter().sum();
        if total > 0.0 {
            for v in &mut energy {
                *v /= total;
            }
        }
        let max = energy.iter().cloned().fold(0.0, f64::max);
        te.push(energy.iter().filter(|&&v| v >= max / 2.0).count());
        ddifs.push(ddif);
        neups.push(energy);
    }

    let mut sorted_te: Vec<usize> = te.clone();
    sorted_te.sort_unstable();
    let median_te = median_usize(&sorted_te);
    let suspicious: Vec<bool> = te.iter().map(|&t| (t as f64) <= tau_c * median_te).collect();

    // Feature vector per client: DDif ++ NEUP ++ cosine row.
    let deltas: Vec<_> = updates.iter().map(|u| &u.delta).collect();
    let features: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut f = ddifs[i].clone();
            f.extend_from_slice(&neups[i]);
            f.extend((0..n).map(|j| if i == j { 1.0 } else { deltas[i].cosine(deltas[j]) }));
            f
        })
        .collect();
    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = features[i]
                .iter()
                .zip(&features[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let labels = gap_cut_clusters(&dist);
    let cluster_count = labels.iter().max().map_or(1, |m| m + 1);
    let mut accept = vec![false; n];
    for cluster in 0..cluster_count {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == cluster).collect();
        let bad = members.iter().filter(|&&i| suspicious[i]).count();
        if (bad as f64) < SUSPICIOUS_FRACTION * members.len() as f64 {
            for &i in &members {
                accept[i] = true;
            }
        }
    }

    let all: Vec<ClientId> = updates.iter().map(|u| u.client_id).collect();
    let mut verdict = DefenseVerdict::partition(&all, |id| {
        let idx = updates.iter().position(|u| u.client_id == id).unwrap();
        !accept[idx]
    });
    verdict.scores = te
        .iter()
        .enumerate()
        .map(|(i, &t)| (updates[i].client_id, t as f64))
        .collect::<BTreeMap<_, _>>();
    if clip && !verdict.accepted.is_empty() {
        let mut norms: Vec<f64> = verdict
            .accepted
            .iter()
            .map(|id| {
                let idx = updates.iter().position(|u| u.client_id == *id).unwrap();
                updates[idx].delta.l2_norm().as_f64()
            })
            .collect();
        norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if norms.len() % 2 == 1 {
            norms[norms.len() / 2]
        } else {
            0.5 * (norms[norms.len() / 2 - 1] + norms[norms.len() / 2])
        };
        verdict.post_processing = Some(PostProcessing { clip_bound: median, noise_sigma: 0.0 });
    }
    Ok(verdict)
}

fn median_usize(sorted: &[usize]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) as f64
    }
}

fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<f64> {
    let classes = logits.shape()[1];
    let rows = logits.shape()[0];
    let lv = logits.values();
    let mut out = vec![0.0f64; rows * classes];
    for r in 0..rows {
        let row = &lv[r * classes..(r + 1) * classes];
        let max = row.iter().cloned().fold(row[0], S::max).as_f64();
        let exps: Vec<f64> = row.iter().map(|x| (x.as_f64() - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for k in 0..classes {
            out[r * classes + k] = exps[k] / denom;
        }
    }
    out
}
