//! Defense contract tests: worked Multi-Krum instances against brute
//! force, clustering behaviors, Foolsgold weighting, FLAME calibration,
//! clipping projections, aggregation arithmetic, and the indicator
//! protocol's BN bookkeeping.


use fedsim_core::data::{
    build_indicator_dataset, gen_noise, gen_synthetic,
};
use fedsim_core::defenses::{
    aggregate_accepted, defend_deepsight, defend_flame, defend_foolsgold, defend_multikrum,
    defend_rflbat, flame_noise_sigma, indicator_accuracy, indicator_inject, indicator_inspect,
    norm_clip, DefenseVerdict, FoolsgoldHistory,
};
use fedsim_core::nn::{flatten, init_model, BnStats, FlatVector, Layout, ModelArch, ModelState};
use fedsim_core::rng::{purpose, CounterRng};
use fedsim_core::tensor::Tensor;
use fedsim_core::train::run_sgd;
use fedsim_core::update::ClientUpdate;
use fedsim_core::ClientId;

fn toy_layout(dim: usize) -> Layout {
    Layout {
        entries: vec![fedsim_core::nn::LayoutEntry {
            layer: 0,
            tensor: 0,
            offset: 0,
            shape: vec![dim],
        }],
        total: dim,
    }
}

fn toy_update(id: ClientId, values: Vec<f64>) -> ClientUpdate<f64> {
    let layout = toy_layout(values.len());
    ClientUpdate {
        client_id: id,
        delta: FlatVector { values, layout },
        uploaded_bn_stats: BnStats { layers: vec![], momentum: 0.1 },
    }
}

// ------------------------------------------------------------- multi-krum

#[test]
fn multikrum_matches_the_worked_one_dimensional_instance() {
    let updates = vec![
        toy_update(0, vec![0.0]),
        toy_update(1, vec![0.1]),
        toy_update(2, vec![0.2]),
        toy_update(3, vec![10.0]),
    ];
    let verdict = defend_multikrum(&updates, 1, 1).unwrap();
    assert_eq!(verdict.accepted, vec![1]);
    // Scores over the 2 nearest peers.
    assert!((verdict.scores[&1] - 0.02).abs() < 1e-12);
    assert!((verdict.scores[&0] - 0.05).abs() < 1e-12);
    assert!((verdict.scores[&2] - 0.05).abs() < 1e-12);
    assert!((verdict.scores[&3] - (96.04 + 98.01)).abs() < 1e-9);
}

#[test]
fn multikrum_ties_break_by_client_id() {
    let updates: Vec<_> = (0..5).map(|i| toy_update(10 - i, vec![1.0, 2.0])).collect();
    let verdict = defend_multikrum(&updates, 1, 2).unwrap();
    assert_eq!(verdict.accepted, vec![6, 7]);
    assert!(verdict.scores.values().all(|&s| s == 0.0));
}

#[test]
fn multikrum_excludes_a_far_outlier() {
    let updates = vec![
        toy_update(0, vec![0.0, 0.0]),
        toy_update(1, vec![0.1, 0.0]),
        toy_update(2, vec![0.0, 0.1]),
        toy_update(3, vec![0.1, 0.1]),
        toy_update(4, vec![50.0, -50.0]),
    ];
    let verdict = defend_multikrum(&updates, 1, 4).unwrap();
    assert_eq!(verdict.flagged, vec![4]);
}

/// Independent reference: recompute scores from the full distance matrix at
/// every iteration and select the minimum.
fn multikrum_brute_force(updates: &[ClientUpdate<f64>], f: usize, m: usize) -> Vec<ClientId> {
    let n = updates.len();
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut picked = Vec::new();
    while picked.len() < m {
        let mut best: Option<(f64, ClientId, usize)> = None;
        for &i in &remaining {
            let mut dists: Vec<f64> = remaining
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| {
                    updates[i]
                        .delta
                        .values
                        .iter()
                        .zip(&updates[j].delta.values)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let score: f64 = dists.iter().take(n - f - 1).sum();
            let id = updates[i].client_id;
            if best.is_none()
                || score < best.unwrap().0
                || (score == best.unwrap().0 && id < best.unwrap().1)
            {
                best = Some((score, id, i));
            }
        }
        let (_, id, idx) = best.unwrap();
        picked.push(id);
        remaining.retain(|&x| x != idx);
    }
    picked.sort_unstable();
    picked
}

#[test]
fn multikrum_agrees_with_brute_force_for_all_valid_f_m() {
    let mut rng = CounterRng::new(77);
    for n in 4..=6usize {
        for trial in 0..20 {
            let updates: Vec<_> = (0..n)
                .map(|i| {
                    toy_update(
                        i as ClientId,
                        (0..3).map(|_| rng.next_gaussian()).collect(),
                    )
                })
                .collect();
            for f in 0..n {
                if 2 * f + 2 > n {
                    continue;
                }
                for m in 1..=n {
                    let verdict = defend_multikrum(&updates, f, m).unwrap();
                    let brute = multikrum_brute_force(&updates, f, m);
                    assert_eq!(verdict.accepted, brute, "n={n} f={f} m={m} trial={trial}");
                }
            }
        }
    }
}

#[test]
fn multikrum_rejects_bad_preconditions() {
    let updates: Vec<_> = (0..4).map(|i| toy_update(i, vec![0.0])).collect();
    assert!(defend_multikrum(&updates, 1, 0).is_err());
    assert!(defend_multikrum(&updates, 1, 5).is_err());
    assert!(defend_multikrum(&updates, 2, 1).is_err()); // 2f+2 = 6 > 4
}

// -------------------------------------------------------------- foolsgold

#[test]
fn foolsgold_flags_identical_histories_and_keeps_orthogonal_ones() {
    let mut history = FoolsgoldHistory::default();
    let updates = vec![
        toy_update(0, vec![1.0, 0.0, 0.0]),
        toy_update(1, vec![1.0, 0.0, 0.0]),
        toy_update(2, vec![0.0, 1.0, 0.0]),
        toy_update(3, vec![0.0, 0.0, 1.0]),
    ];
    for u in &updates {
        history.accumulate(u).unwrap();
    }
    let verdict = defend_foolsgold(&updates, &history).unwrap();
    assert_eq!(verdict.flagged, vec![0, 1]);
    assert_eq!(verdict.accepted, vec![2, 3]);
    assert_eq!(verdict.weights[&2], 1.0);
    assert_eq!(verdict.weights[&3], 1.0);
}

#[test]
fn foolsgold_eight_orthogonal_benign_two_identical_malicious() {
    let mut history = FoolsgoldHistory::default();
    let mut updates = Vec::new();
    for i in 0..8u32 {
        let mut v = vec![0.0; 10];
        v[i as usize] = 1.0;
        updates.push(toy_update(i, v));
    }
    let mut mal = vec![0.0; 10];
    mal[8] = 0.7;
    mal[9] = 0.7;
    updates.push(toy_update(8, mal.clone()));
    updates.push(toy_update(9, mal));
    for u in &updates {
        history.accumulate(u).unwrap();
    }
    let verdict = defend_foolsgold(&updates, &history).unwrap();
    assert_eq!(verdict.flagged, vec![8, 9]);
}

#[test]
fn foolsgold_zero_norm_history_keeps_full_weight() {
    let mut history = FoolsgoldHistory::default();
    let updates = vec![
        toy_update(0, vec![0.0, 0.0]),
        toy_update(1, vec![1.0, 0.0]),
        toy_update(2, vec![0.0, 1.0]),
    ];
    for u in &updates {
        history.accumulate(u).unwrap();
    }
    let verdict = defend_foolsgold(&updates, &history).unwrap();
    assert!(verdict.accepted.contains(&0));
    assert_eq!(verdict.weights[&0], 1.0);
}

#[test]
fn foolsgold_history_grows_by_addition() {
    let mut history = FoolsgoldHistory::default();
    history.accumulate(&toy_update(5, vec![1.0, 2.0])).unwrap();
    history.accumulate(&toy_update(5, vec![0.5, -1.0])).unwrap();
    assert_eq!(history.cumulative[&5].values, vec![1.5, 1.0]);
}

// ------------------------------------------------------------------ flame

#[test]
fn flame_sigma_matches_closed_form_to_1e12() {
    let sigma = flame_noise_sigma(1.0, 1.0, 0.05);
    let expect = (2.0 * (1.25f64 / 0.05).ln()).sqrt();
    assert!((sigma - expect).abs() / expect < 1e-12);
    assert!((sigma - 2.537272482359039).abs() < 1e-12);
}

#[test]
fn flame_accepts_identical_updates_with_identity_clip() {
    let updates: Vec<_> = (0..5).map(|i| toy_update(i, vec![3.0, 4.0])).collect();
    let verdict = defend_flame(&updates, 1.0, 0.05).unwrap();
    assert_eq!(verdict.accepted.len(), 5);
    let pp = verdict.post_processing.unwrap();
    assert_eq!(pp.clip_bound, 5.0);
    assert!((pp.noise_sigma - flame_noise_sigma(5.0, 1.0, 0.05)).abs() < 1e-12);
}

#[test]
fn flame_flags_an_antiparallel_minority() {
    let mut rng = CounterRng::new(5);
    let mut updates = Vec::new();
    for i in 0..7u32 {
        let v: Vec<f64> = (0..6).map(|k| 1.0 + 0.01 * rng.next_gaussian() + k as f64 * 0.1).collect();
        updates.push(toy_update(i, v));
    }
    for i in 7..10u32 {
        let v: Vec<f64> = (0..6).map(|k| -1.0 - k as f64 * 0.1 + 0.01 * rng.next_gaussian()).collect();
        updates.push(toy_update(i, v));
    }
    let verdict = defend_flame(&updates, 1.0, 0.05).unwrap();
    assert_eq!(verdict.flagged, vec![7, 8, 9]);
}

#[test]
fn flame_fallback_when_no_majority_cluster() {
    // Two groups of two: no cluster reaches n/2+1 = 3; fallback keeps the 3
    // most centrally similar updates.
    let updates = vec![
        toy_update(0, vec![1.0, 0.0]),
        toy_update(1, vec![1.0, 0.01]),
        toy_update(2, vec![-1.0, 0.0]),
        toy_update(3, vec![-1.0, -0.01]),
    ];
    let verdict = defend_flame(&updates, 1.0, 0.05).unwrap();
    assert_eq!(verdict.accepted.len(), 3);
    verdict.check_partition(&[0, 1, 2, 3]).unwrap();
}

// -------------------------------------------------------------- deepsight

fn model_shaped_update(
    id: ClientId,
    base: &ModelState<f64>,
    fill: impl Fn(usize, usize, usize) -> f64,
) -> ClientUpdate<f64> {
    let mut flat = flatten(base);
    for entry in flat.layout.entries.clone() {
        let len: usize = entry.shape.iter().product();
        for k in 0..len {
            flat.values[entry.offset + k] = fill(entry.layer, entry.tensor, k);
        }
    }
    ClientUpdate { client_id: id, delta: flat, uploaded_bn_stats: base.bn_stats.clone() }
}

#[test]
fn deepsight_flags_concentrated_output_energy() {
    let arch = ModelArch::mlp(vec![1, 4, 4], 8, 4);
    let global: ModelState<f64> =
        init_model(&arch, &mut CounterRng::derive(1, &[purpose::MODEL_INIT])).unwrap();
    let last = arch.final_dense_layer().unwrap();
    let mut rng = CounterRng::new(2);
    let mut updates = Vec::new();
    // Benign: spread output-layer energy (TE = num_classes).
    for i in 0..6u32 {
        let noise: Vec<f64> = (0..4096).map(|_| rng.next_gaussian()).collect();
        updates.push(model_shaped_update(i, &global, |layer, _, k| {
            if layer == last {
                0.02 + 0.001 * noise[(i as usize * 64 + k) % 4096].abs()
            } else {
                0.01 * noise[(i as usize * 97 + k) % 4096]
            }
        }));
    }
    // Malicious: all output energy on neuron 2 (TE = 1).
    let in_features = 8usize;
    updates.push(model_shaped_update(9, &global, |layer, tensor, k| {
        if layer == last {
            let neuron = if tensor == 0 { k / in_features } else { k };
            if neuron == 2 {
                0.5
            } else {
                0.0
            }
        } else {
            0.0
        }
    }));
    let verdict = defend_deepsight(&updates, &global, 0.5, true, 7).unwrap();
    assert!(verdict.flagged.contains(&9), "flagged {:?}", verdict.flagged);
    assert!(verdict.accepted.len() >= 5);
    // TE scores: malicious 1, benign = num_classes.
    assert_eq!(verdict.scores[&9], 1.0);
}

#[test]
fn deepsight_accepts_identical_updates() {
    let arch = ModelArch::mlp(vec![1, 4, 4], 8, 4);
    let global: ModelState<f64> =
        init_model(&arch, &mut CounterRng::derive(3, &[purpose::MODEL_INIT])).unwrap();
    let updates: Vec<_> = (0..5u32)
        .map(|i| model_shaped_update(i, &global, |_, _, k| 0.01 * (k as f64 * 0.37).sin()))
        .collect();
    let verdict = defend_deepsight(&updates, &global, 0.5, true, 8).unwrap();
    assert_eq!(verdict.accepted.len(), 5);
    // Identity clip: bound equals the common norm.
    let pp = verdict.post_processing.unwrap();
    let norm = updates[0].delta.l2_norm();
    assert!((pp.clip_bound - norm).abs() < 1e-12);
    assert_eq!(pp.noise_sigma, 0.0);
}

// ----------------------------------------------------------------- rflbat

#[test]
fn rflbat_round_one_drops_a_distant_outlier() {
    let mut rng = CounterRng::new(11);
    let mut updates: Vec<_> = (0..9u32)
        .map(|i| {
            toy_update(
                i,
                (0..5).map(|_| 1.0 + 0.01 * rng.next_gaussian()).collect(),
            )
        })
        .collect();
    updates.push(toy_update(9, vec![100.0, -100.0, 100.0, -100.0, 100.0]));
    let verdict = defend_rflbat(&updates, 2.0, 2, 5).unwrap();
    assert!(verdict.flagged.contains(&9));
}

#[test]
fn rflbat_degenerate_zero_variance_accepts_all() {
    let updates: Vec<_> = (0..4u32).map(|i| toy_update(i, vec![1.0, 2.0, 3.0])).collect();
    let verdict = defend_rflbat(&updates, 2.0, 2, 5).unwrap();
    assert_eq!(verdict.accepted.len(), 4);
}

#[test]
fn rflbat_picks_the_mutually_aligned_cluster() {
    let mut rng = CounterRng::new(13);
    let mut updates = Vec::new();
    // 7 benign: same direction, high mutual cosine.
    for i in 0..7u32 {
        let v: Vec<f64> = (0..6).map(|k| (k as f64 + 1.0) * 0.5 + 0.01 * rng.next_gaussian()).collect();
        updates.push(toy_update(i, v));
    }
    // 3 malicious: opposite direction blob, also tight but smaller cluster.
    for i in 7..10u32 {
        let v: Vec<f64> = (0..6)
            .map(|k| -(k as f64 + 1.0) * 0.5 + 0.01 * rng.next_gaussian())
            .collect();
        updates.push(toy_update(i, v));
    }
    let verdict = defend_rflbat(&updates, 10.0, 2, 5).unwrap();
    for i in 0..7u32 {
        assert!(verdict.accepted.contains(&i), "benign {i} rejected");
    }
    for i in 7..10u32 {
        assert!(verdict.flagged.contains(&i), "malicious {i} kept");
    }
}

#[test]
fn rflbat_requires_three_updates() {
    let updates: Vec<_> = (0..2u32).map(|i| toy_update(i, vec![1.0])).collect();
    assert!(defend_rflbat(&updates, 2.0, 2, 5).is_err());
}

// -------------------------------------------------------------- norm_clip

#[test]
fn norm_clip_projects_and_is_idempotent() {
    let updates = vec![toy_update(0, vec![6.0, 8.0]), toy_update(1, vec![3.0, 0.0])];
    let clipped = norm_clip(&updates, 5.0).unwrap();
    assert!((clipped[0].delta.l2_norm() - 5.0).abs() < 1e-12);
    assert!((clipped[0].delta.values[0] - 3.0).abs() < 1e-12);
    assert!((clipped[0].delta.values[1] - 4.0).abs() < 1e-12);
    // Below the bound: bit-identical.
    assert_eq!(clipped[1].delta.values, updates[1].delta.values);
    // Idempotent projection.
    let twice = norm_clip(&clipped, 5.0).unwrap();
    for (a, b) in twice.iter().zip(&clipped) {
        assert_eq!(a.delta.values, b.delta.values);
    }
    assert!(norm_clip(&updates, 0.0).is_err());
}

// ------------------------------------------------------------- aggregation

fn real_model(seed: u64) -> ModelState<f64> {
    let arch = ModelArch::mlp(vec![1, 4, 4], 6, 3);
    init_model(&arch, &mut CounterRng::derive(seed, &[purpose::MODEL_INIT])).unwrap()
}

fn const_update(id: ClientId, base: &ModelState<f64>, value: f64) -> ClientUpdate<f64> {
    let mut flat = flatten(base);
    for v in &mut flat.values {
        *v = value;
    }
    ClientUpdate { client_id: id, delta: flat, uploaded_bn_stats: base.bn_stats.clone() }
}

#[test]
fn aggregate_takes_the_mean_of_accepted_deltas() {
    let w_ind = real_model(21);
    let updates = vec![const_update(0, &w_ind, 1.0), const_update(1, &w_ind, 3.0)];
    let verdict = DefenseVerdict::accept_all([0, 1]);
    let next = aggregate_accepted(&w_ind, &updates, &verdict, None).unwrap();
    let before = flatten(&w_ind);
    let after = flatten(&next);
    for (a, b) in after.values.iter().zip(&before.values) {
        assert!((a - b - 2.0).abs() < 1e-12);
    }
}

#[test]
fn aggregate_empty_acceptance_keeps_broadcast() {
    let w_ind = real_model(22);
    let updates = vec![const_update(0, &w_ind, 1.0)];
    let mut verdict = DefenseVerdict::accept_all([0]);
    verdict.accepted.clear();
    verdict.flagged = vec![0];
    let next = aggregate_accepted(&w_ind, &updates, &verdict, None).unwrap();
    assert_eq!(next, w_ind);
}

#[test]
fn fewer_acceptances_amplify_each_update() {
    // 1 malicious among 10: weight 1/10 when all accepted, 1/5 when 5
    // benign updates are rejected.
    let w_ind = real_model(23);
    let mut updates = vec![const_update(0, &w_ind, 1.0)];
    for i in 1..10u32 {
        updates.push(const_update(i, &w_ind, 0.0));
    }
    let all = DefenseVerdict::accept_all(0..10);
    let next_all = aggregate_accepted(&w_ind, &updates, &all, None).unwrap();
    let delta_all = flatten(&next_all).sub(&flatten(&w_ind)).unwrap();
    assert!((delta_all.values[0] - 0.1).abs() < 1e-12);

    let partial = DefenseVerdict::partition(&(0..10).collect::<Vec<_>>(), |id| id >= 5);
    let next_partial = aggregate_accepted(&w_ind, &updates, &partial, None).unwrap();
    let delta_partial = flatten(&next_partial).sub(&flatten(&w_ind)).unwrap();
    assert!((delta_partial.values[0] - 1.0 / 5.0).abs() < 1e-12);
}

#[test]
fn aggregate_applies_clip_weights_and_noise() {
    let w_ind = real_model(24);
    let dim = flatten(&w_ind).len() as f64;
    let updates = vec![const_update(0, &w_ind, 2.0)];
    let mut verdict = DefenseVerdict::accept_all([0]);
    // Clip the delta (norm 2*sqrt(d)) down to sqrt(d): halves every coord.
    verdict.post_processing = Some(fedsim_core::defenses::PostProcessing {
        clip_bound: dim.sqrt(),
        noise_sigma: 0.0,
    });
    let next = aggregate_accepted(&w_ind, &updates, &verdict, None).unwrap();
    let delta = flatten(&next).sub(&flatten(&w_ind)).unwrap();
    assert!((delta.values[0] - 1.0).abs() < 1e-12);

    // Foolsgold-style weights scale contributions.
    let mut weighted = DefenseVerdict::accept_all([0]);
    weighted.weights.insert(0, 0.5);
    let next = aggregate_accepted(&w_ind, &updates, &weighted, None).unwrap();
    let delta = flatten(&next).sub(&flatten(&w_ind)).unwrap();
    assert!((delta.values[0] - 1.0).abs() < 1e-12);

    // Noise: deterministic under the stream, nonzero, and absent at sigma 0.
    let mut noisy = DefenseVerdict::accept_all([0]);
    noisy.post_processing = Some(fedsim_core::defenses::PostProcessing {
        clip_bound: f64::INFINITY,
        noise_sigma: 0.5,
    });
    assert!(aggregate_accepted(&w_ind, &updates, &noisy, None).is_err());
    let a = aggregate_accepted(&w_ind, &updates, &noisy, Some(&mut CounterRng::new(9))).unwrap();
    let b = aggregate_accepted(&w_ind, &updates, &noisy, Some(&mut CounterRng::new(9))).unwrap();
    assert_eq!(a, b);
    assert_ne!(flatten(&a).values, flatten(&next).values);
}

#[test]
fn aggregate_means_uploaded_bn_stats() {
    let w_ind = real_model(25);
    let mut u0 = const_update(0, &w_ind, 0.0);
    let mut u1 = const_update(1, &w_ind, 0.0);
    u0.uploaded_bn_stats.layers[0].running_mean[0] = 2.0;
    u1.uploaded_bn_stats.layers[0].running_mean[0] = 4.0;
    let verdict = DefenseVerdict::accept_all([0, 1]);
    let next = aggregate_accepted(&w_ind, &[u0, u1], &verdict, None).unwrap();
    assert_eq!(next.bn_stats.layers[0].running_mean[0], 3.0);
}

// -------------------------------------------------------------- indicator

#[test]
fn indicator_inject_restores_global_bn_stats_bitwise() {
    let ds = gen_synthetic::<f64>(4, 4, 20, 31).unwrap();
    let arch = ModelArch::mlp(vec![1, 4, 4], 8, 4);
    let mut global = init_model(&arch, &mut CounterRng::derive(31, &[purpose::MODEL_INIT])).unwrap();
    run_sgd(&mut global, &ds, 0.05, 30, 16, &mut CounterRng::new(32)).unwrap();
    let source = gen_noise::<f64>(50, 4, 33).unwrap();
    let ind = build_indicator_dataset(&source, 40, 4, &ds.name, 34, false).unwrap();
    let (w_ind, state) =
        indicator_inject(&global, &ind, 0.1, 50, 0.05, 16, 95.0, &mut CounterRng::new(35)).unwrap();

    assert_eq!(w_ind.get_bn_stats(), global.get_bn_stats());
    assert_eq!(state.main_stats, global.get_bn_stats());
    assert_ne!(state.indicator_stats, state.main_stats);
    // Learnable params moved (the indicator task was trained).
    assert_ne!(flatten(&w_ind).values, flatten(&global).values);

    // BN swap round trip is bit-lossless.
    let mut probe = w_ind.clone();
    probe.set_bn_stats(state.indicator_stats.clone()).unwrap();
    probe.set_bn_stats(state.main_stats.clone()).unwrap();
    assert_eq!(probe, w_ind);
}

#[test]
fn indicator_injection_reaches_high_accuracy_with_no_regularizer() {
    // lambda = 0, 200 iterations on the reference MLP memorizes a small
    // indicator set to at least 95 (pinned seed).
    let ds = gen_synthetic::<f64>(10, 8, 100, 7).unwrap();
    let arch = ModelArch::mlp(vec![1, 8, 8], 64, 10);
    let mut global = init_model(&arch, &mut CounterRng::derive(7, &[purpose::MODEL_INIT])).unwrap();
    run_sgd(&mut global, &ds, 0.05, 200, 64, &mut CounterRng::new(8)).unwrap();
    let source = gen_noise::<f64>(200, 8, 99).unwrap();
    let ind = build_indicator_dataset(&source, 100, 10, &ds.name, 13, false).unwrap();
    let (w_ind, state) =
        indicator_inject(&global, &ind, 0.0, 200, 0.05, 64, 95.0, &mut CounterRng::new(14)).unwrap();
    let (_, alpha_m, _) = indicator_accuracy(&state, &w_ind).unwrap();
    assert!(alpha_m >= 95.0, "alpha_m {alpha_m}");
}

#[test]
fn indicator_inspect_flags_a_crafted_memorizer() {
    let ds = gen_synthetic::<f64>(4, 4, 20, 41).unwrap();
    let arch = ModelArch::mlp(vec![1, 4, 4], 8, 4);
    let mut global = init_model(&arch, &mut CounterRng::derive(41, &[purpose::MODEL_INIT])).unwrap();
    run_sgd(&mut global, &ds, 0.05, 30, 16, &mut CounterRng::new(42)).unwrap();
    let source = gen_noise::<f64>(60, 4, 43).unwrap();
    let ind = build_indicator_dataset(&source, 40, 4, &ds.name, 44, false).unwrap();
    let (w_ind, state) =
        indicator_inject(&global, &ind, 0.1, 50, 0.05, 16, 95.0, &mut CounterRng::new(45)).unwrap();

    // Craft a model that always answers label 3: zero final weights, a
    // one-hot bias. Its alpha_3 is 100, so it must be flagged with target 3.
    let mut crafted = w_ind.clone();
    let last = arch.final_dense_layer().unwrap();
    crafted.params[last][0] = Tensor::zeros(crafted.params[last][0].shape().to_vec());
    let mut bias = vec![0.0; 4];
    bias[3] = 10.0;
    crafted.params[last][1] = Tensor::new(vec![4], bias).unwrap();
    let memorizer = ClientUpdate::from_training(0, &w_ind, &crafted).unwrap();

    // A do-nothing client (zero delta) rides along.
    let zero = ClientUpdate::from_training(1, &w_ind, &w_ind).unwrap();

    let before_updates = vec![memorizer.clone(), zero.clone()];
    let verdict = indicator_inspect(&state, &before_updates).unwrap();
    assert!(verdict.flagged.contains(&0));
    assert_eq!(verdict.scores[&0], 100.0);
    assert_eq!(verdict.inferred_targets[&0], 3);
    // Inspection mutates neither the updates nor the broadcast model.
    assert_eq!(before_updates[0], memorizer);
    assert_eq!(state.broadcast, w_ind);
    verdict.check_partition(&[0, 1]).unwrap();
}

#[test]
fn indicator_inject_validates_arguments() {
    let ds = gen_synthetic::<f64>(4, 4, 10, 51).unwrap();
    let arch = ModelArch::mlp(vec![1, 4, 4], 8, 4);
    let global: ModelState<f64> =
        init_model(&arch, &mut CounterRng::derive(51, &[purpose::MODEL_INIT])).unwrap();
    let source = gen_noise::<f64>(20, 4, 52).unwrap();
    let ind = build_indicator_dataset(&source, 10, 4, &ds.name, 53, false).unwrap();
    let empty = build_indicator_dataset(&source, 0, 4, &ds.name, 53, false).unwrap();
    assert!(indicator_inject(&global, &empty, 0.1, 10, 0.05, 8, 95.0, &mut CounterRng::new(1)).is_err());
    assert!(indicator_inject(&global, &ind, -0.1, 10, 0.05, 8, 95.0, &mut CounterRng::new(1)).is_err());
    assert!(indicator_inject(&global, &ind, 0.1, 0, 0.05, 8, 95.0, &mut CounterRng::new(1)).is_err());
    assert!(indicator_inject(&global, &ind, 0.1, 10, 0.05, 8, 101.0, &mut CounterRng::new(1)).is_err());
}

// --------------------------------------------------- partition invariants

#[test]
fn every_defense_partitions_the_received_set() {
    let mut rng = CounterRng::new(61);
    let updates: Vec<_> = (0..8u32)
        .map(|i| toy_update(i, (0..4).map(|_| rng.next_gaussian()).collect()))
        .collect();
    let all: Vec<ClientId> = (0..8).collect();

    defend_multikrum(&updates, 1, 4).unwrap().check_partition(&all).unwrap();
    defend_flame(&updates, 1.0, 0.05).unwrap().check_partition(&all).unwrap();
    defend_rflbat(&updates, 2.0, 2, 5).unwrap().check_partition(&all).unwrap();
    let mut history = FoolsgoldHistory::default();
    for u in &updates {
        history.accumulate(u).unwrap();
    }
    defend_foolsgold(&updates, &history).unwrap().check_partition(&all).unwrap();
}

