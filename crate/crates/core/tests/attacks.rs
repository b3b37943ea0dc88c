//! Attack contract tests: projection and freezing invariants, zero-sum
//! noise, stage separation, and the desk-scale backdoor oracle.

use fedsim_core::attacks::{
    adaptive_attack, assign_dba_parts, chameleon_stage1, chameleon_stage2, scale_update,
    top_k_indices, train_3dfed, train_neurotoxin, train_pgd, train_vanilla, zero_sum_masks,
    MaliciousCohort, PretrainConfig, ThreeDFedConfig,
};
use fedsim_core::data::{
    backdoor_eval_set, build_poison_dataset, gen_synthetic, gen_synthetic_split, Dataset,
    TriggerSpec, SYNTH_NOISE_STD,
};
use fedsim_core::nn::{flatten, init_model, mean_of, supcon_loss_grad, ModelArch, ModelState};
use fedsim_core::rng::{purpose, CounterRng};
use fedsim_core::tensor::Tensor;
use fedsim_core::train::{accuracy, run_sgd};
use fedsim_core::update::ClientUpdate;

fn small_setup(seed: u64) -> (ModelState<f64>, Dataset<f64>) {
    let ds = gen_synthetic::<f64>(4, 4, 20, seed).unwrap();
    let arch = ModelArch::mlp(vec![1, 4, 4], 12, 4);
    let state = init_model(&arch, &mut CounterRng::derive(seed, &[purpose::MODEL_INIT])).unwrap();
    (state, ds)
}

#[test]
fn vanilla_zero_iters_is_identity_and_m0_matches_benign() {
    let (start, benign) = small_setup(1);
    let spec = TriggerSpec::corner_block(0);
    let unchanged =
        train_vanilla(&start, &benign, 0.05, 0, 8, &mut CounterRng::new(2)).unwrap();
    assert_eq!(unchanged, start);

    // M = 0 poison: same trajectory as benign local training on the same
    // (permuted) data with the same stream.
    let poisoned = build_poison_dataset(&benign, &spec, 0, 3, None).unwrap();
    let attacked = train_vanilla(&start, &poisoned, 0.05, 10, 8, &mut CounterRng::new(4)).unwrap();
    let mut benign_run = start.clone();
    run_sgd(&mut benign_run, &poisoned, 0.05, 10, 8, &mut CounterRng::new(4)).unwrap();
    assert_eq!(attacked, benign_run);
}

#[test]
fn vanilla_desk_run_reaches_backdoor_accuracy() {
    // Pinned-seed oracle: benign-pretrained MLP, 200 poison iterations at
    // plr 0.05 with 200 triggered samples pushes BA to at least 80%.
    let (train_ds, test_ds) =
        gen_synthetic_split::<f64>(10, 8, 100, 20, SYNTH_NOISE_STD, 7).unwrap();
    let arch = ModelArch::mlp(vec![1, 8, 8], 64, 10);
    let mut global = init_model(&arch, &mut CounterRng::derive(7, &[purpose::MODEL_INIT])).unwrap();
    run_sgd(&mut global, &train_ds, 0.05, 200, 64, &mut CounterRng::new(8)).unwrap();

    let spec = TriggerSpec::corner_block(3);
    let poisoned = build_poison_dataset(&train_ds, &spec, 200, 9, None).unwrap();
    let attacked = train_vanilla(&global, &poisoned, 0.05, 200, 64, &mut CounterRng::new(10)).unwrap();

    let ba_set = backdoor_eval_set(&spec, &test_ds, None, None).unwrap();
    let ba = accuracy(&attacked, &ba_set).unwrap();
    assert!(ba >= 80.0, "backdoor accuracy {ba}");
    // Clean accuracy survives the attack.
    let ma = accuracy(&attacked, &test_ds).unwrap();
    assert!(ma >= 80.0, "main accuracy {ma}");
}

#[test]
fn pgd_projection_bounds_every_iteration() {
    let (start, benign) = small_setup(11);
    let spec = TriggerSpec::corner_block(1);
    let poisoned = build_poison_dataset(&benign, &spec, 20, 12, None).unwrap();
    let radius = 0.05;
    let mut rng = CounterRng::new(13);
    let mut state = start.clone();
    for _ in 0..20 {
        let anchor = flatten(&state);
        state = train_pgd(&state, &poisoned, 0.1, 1, 8, radius, &mut rng).unwrap();
        let dev = flatten(&state).sub(&anchor).unwrap().l2_norm();
        assert!(dev <= radius + 1e-9, "deviation {dev}");
    }
}

#[test]
fn pgd_with_infinite_radius_matches_vanilla() {
    let (start, benign) = small_setup(14);
    let spec = TriggerSpec::corner_block(1);
    let poisoned = build_poison_dataset(&benign, &spec, 10, 15, None).unwrap();
    let a = train_pgd(&start, &poisoned, 0.05, 15, 8, f64::INFINITY, &mut CounterRng::new(16)).unwrap();
    let b = train_vanilla(&start, &poisoned, 0.05, 15, 8, &mut CounterRng::new(16)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pgd_projection_scales_deviation_exactly() {
    // Deviation of norm 2 against radius 1 halves; re-projending is a no-op.
    let (start, benign) = small_setup(17);
    let spec = TriggerSpec::corner_block(1);
    let poisoned = build_poison_dataset(&benign, &spec, 10, 18, None).unwrap();
    // One huge step produces a deviation beyond the radius.
    let stepped = train_pgd(&start, &poisoned, 5.0, 1, 8, 1e-3, &mut CounterRng::new(19)).unwrap();
    let dev = flatten(&stepped).sub(&flatten(&start)).unwrap().l2_norm();
    assert!((dev - 1e-3).abs() < 1e-12, "projected norm {dev}");
}

#[test]
fn top_k_ranks_by_magnitude_then_index() {
    // Benign |g| = (3, 1, 2), k = 1/3: coordinate 0 frozen.
    assert_eq!(top_k_indices(&[3.0, 1.0, 2.0], 1.0 / 3.0), vec![0]);
    // Ties break toward the lower index.
    assert_eq!(top_k_indices(&[2.0, 2.0, 2.0], 2.0 / 3.0), vec![0, 1]);
}

#[test]
fn neurotoxin_freezes_exactly_the_masked_coordinates() {
    let (mut start, benign) = small_setup(20);
    // A benign-plausible starting point sharpens the gradient ranking.
    run_sgd(&mut start, &benign, 0.05, 20, 8, &mut CounterRng::new(21)).unwrap();
    let spec = TriggerSpec::corner_block(2);
    let poisoned = build_poison_dataset(&benign, &spec, 20, 22, None).unwrap();
    let k = 0.25;
    let attacked =
        train_neurotoxin(&start, &poisoned, &benign, 0.05, 25, 8, k, &mut CounterRng::new(23))
            .unwrap();

    let d = flatten(&start).len();
    let expect_frozen = (k * d as f64).round() as usize;
    let start_flat = flatten(&start);
    let out_flat = flatten(&attacked);
    let unchanged = start_flat
        .values
        .iter()
        .zip(&out_flat.values)
        .filter(|(a, b)| a.to_bits() == b.to_bits())
        .count();
    assert!(
        unchanged >= expect_frozen,
        "only {unchanged} coordinates bit-unchanged, mask holds {expect_frozen}"
    );

    // The frozen set is the top-k benign-gradient coordinates; recompute it
    // and check those exact coordinates never moved.
    let grads = fedsim_core::train::full_batch_gradient(&start, &benign).unwrap();
    let mut mags = Vec::new();
    for tensors in &grads.per_layer {
        for t in tensors {
            mags.extend(t.values().iter().map(|v| v.abs()));
        }
    }
    let frozen = top_k_indices(&mags, k);
    assert_eq!(frozen.len(), expect_frozen);
    for &i in &frozen {
        assert_eq!(
            start_flat.values[i].to_bits(),
            out_flat.values[i].to_bits(),
            "frozen coordinate {i} moved"
        );
    }
}

#[test]
fn neurotoxin_k_near_one_returns_start_params() {
    let (start, benign) = small_setup(24);
    let spec = TriggerSpec::corner_block(2);
    let poisoned = build_poison_dataset(&benign, &spec, 10, 25, None).unwrap();
    let d = flatten(&start).len() as f64;
    // k large enough that round(k * d) == d.
    let k = 1.0 - 0.1 / d;
    let attacked =
        train_neurotoxin(&start, &poisoned, &benign, 0.05, 10, 8, k, &mut CounterRng::new(26))
            .unwrap();
    assert_eq!(flatten(&attacked).values, flatten(&start).values);
}

#[test]
fn chameleon_stage2_keeps_encoder_bit_frozen() {
    let (start, benign) = small_setup(27);
    let spec = TriggerSpec::corner_block(3);
    let poisoned = build_poison_dataset(&benign, &spec, 20, 28, None).unwrap();
    let mut rng = CounterRng::new(29);
    let after1 = chameleon_stage1(&start, &poisoned, 0.05, 10, 8, &mut rng).unwrap();
    let after2 = chameleon_stage2(&after1, &poisoned, 0.05, 10, 8, &mut rng).unwrap();

    let classifier = start.arch.final_dense_layer().unwrap();
    for layer in 0..start.arch.layers.len() {
        if layer == classifier {
            assert_ne!(after2.params[layer], after1.params[layer], "classifier untouched");
        } else {
            assert_eq!(after2.params[layer], after1.params[layer], "encoder layer {layer} moved");
        }
    }
    // Stage 1 keeps the classifier untouched.
    assert_eq!(after1.params[classifier], start.params[classifier]);
}

#[test]
fn chameleon_zero_iters_is_identity() {
    let (start, benign) = small_setup(30);
    let spec = TriggerSpec::corner_block(3);
    let poisoned = build_poison_dataset(&benign, &spec, 10, 31, None).unwrap();
    let out = fedsim_core::attacks::train_chameleon(&start, &poisoned, 0.05, 0, 8, &mut CounterRng::new(32)).unwrap();
    assert_eq!(out, start);
}

#[test]
fn supcon_prefers_class_collapsed_embeddings() {
    // Two classes, collapsed: all same-label points identical, classes apart.
    let collapsed = Tensor::new(
        vec![4, 2],
        vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
    )
    .unwrap();
    // Scattered: same labels point in unrelated directions.
    let scattered = Tensor::new(
        vec![4, 2],
        vec![1.0, 0.0, -1.0, 0.1, 0.0, 1.0, 0.3, -1.0],
    )
    .unwrap();
    let labels = [0usize, 0, 1, 1];
    let (l_collapsed, _) = supcon_loss_grad(&collapsed, &labels, 0.1).unwrap();
    let (l_scattered, _) = supcon_loss_grad(&scattered, &labels, 0.1).unwrap();
    assert!(
        l_collapsed < l_scattered,
        "collapsed {l_collapsed} vs scattered {l_scattered}"
    );
}

#[test]
fn supcon_gradient_matches_finite_differences() {
    let mut rng = CounterRng::new(33);
    let values: Vec<f64> = (0..12).map(|_| rng.next_gaussian()).collect();
    let features = Tensor::new(vec![4, 3], values.clone()).unwrap();
    let labels = [0usize, 1, 0, 1];
    let tau = 0.25;
    let (_, grad) = supcon_loss_grad(&features, &labels, tau).unwrap();
    let h = 1e-6;
    for i in 0..values.len() {
        let mut plus = values.clone();
        plus[i] += h;
        let mut minus = values.clone();
        minus[i] -= h;
        let (lp, _) = supcon_loss_grad(&Tensor::new(vec![4, 3], plus).unwrap(), &labels, tau).unwrap();
        let (lm, _) = supcon_loss_grad(&Tensor::new(vec![4, 3], minus).unwrap(), &labels, tau).unwrap();
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grad.values()[i];
        assert!(
            (numeric - analytic).abs() <= 1e-4 * numeric.abs().max(1.0),
            "coordinate {i}: analytic {analytic}, numeric {numeric}"
        );
    }
}

#[test]
fn zero_sum_masks_cancel_bitwise() {
    let masks = zero_sum_masks::<f64>(5, 64, 0.01, 42);
    assert_eq!(masks.len(), 5);
    for d in 0..64 {
        let mut acc = 0.0f64;
        for m in &masks {
            acc += m[d];
        }
        assert_eq!(acc, 0.0, "coordinate {d} sums to {acc}");
    }
    // Single-member cohorts carry zero noise by construction.
    let single = zero_sum_masks::<f64>(1, 8, 0.5, 1);
    assert!(single[0].iter().all(|&v| v == 0.0));
}

#[test]
fn threedfed_aggregate_is_noise_invariant_and_constraint_pulls() {
    let (mut start, benign) = small_setup(34);
    run_sgd(&mut start, &benign, 0.05, 30, 8, &mut CounterRng::new(35)).unwrap();
    let spec = TriggerSpec::corner_block(1);
    let poisoned = build_poison_dataset(&benign, &spec, 20, 36, None).unwrap();
    let cohort = MaliciousCohort { client_ids: vec![3, 5, 9], seed: 77 };

    let noisy_cfg = ThreeDFedConfig { lambda_c: 0.1, noise_scale: 0.05, decoy_count: 0 };
    let clean_cfg = ThreeDFedConfig { noise_scale: 0.0, ..noisy_cfg };
    let noisy = train_3dfed(&cohort, &start, &poisoned, &benign, &noisy_cfg, 0.05, 10, 8).unwrap();
    let clean = train_3dfed(&cohort, &start, &poisoned, &benign, &clean_cfg, 0.05, 10, 8).unwrap();

    // Per-update deltas differ (masks present) ...
    assert!(noisy.iter().zip(&clean).any(|(a, b)| a.delta != b.delta));
    // ... but the cohort mean is mask-invariant.
    let mean_noisy = mean_of(&noisy.iter().map(|u| &u.delta).collect::<Vec<_>>()).unwrap();
    let mean_clean = mean_of(&clean.iter().map(|u| &u.delta).collect::<Vec<_>>()).unwrap();
    for (a, b) in mean_noisy.values.iter().zip(&mean_clean.values) {
        assert!((a - b).abs() <= 1e-12, "aggregate moved by {}", (a - b).abs());
    }

    // Monotone pull: larger lambda_c keeps the backdoor model closer to start.
    let mut last = f64::INFINITY;
    for lambda in [0.0, 0.1, 1.0, 10.0] {
        let cfg = ThreeDFedConfig { lambda_c: lambda, noise_scale: 0.0, decoy_count: 0 };
        let one = MaliciousCohort { client_ids: vec![3], seed: 78 };
        let updates = train_3dfed(&one, &start, &poisoned, &benign, &cfg, 0.05, 20, 8).unwrap();
        let dist = updates[0].delta.l2_norm();
        assert!(dist <= last + 1e-12, "lambda {lambda}: {dist} > {last}");
        last = dist;
    }
}

#[test]
fn threedfed_decoys_train_benign_style() {
    let (start, benign) = small_setup(37);
    let spec = TriggerSpec::corner_block(1);
    let poisoned = build_poison_dataset(&benign, &spec, 20, 38, None).unwrap();
    let cohort = MaliciousCohort { client_ids: vec![1, 2], seed: 80 };
    let cfg = ThreeDFedConfig { lambda_c: 0.1, noise_scale: 0.0, decoy_count: 1 };
    let updates = train_3dfed(&cohort, &start, &poisoned, &benign, &cfg, 0.05, 10, 8).unwrap();
    assert_eq!(updates.len(), 2);

    // The decoy (last member) reproduces plain benign training on its stream.
    let mut rng = CounterRng::derive(80, &[purpose::ATTACK, 2]);
    let mut expect = start.clone();
    run_sgd(&mut expect, &benign, 0.05, 10, 8, &mut rng).unwrap();
    let expect_update = ClientUpdate::from_training(2, &start, &expect).unwrap();
    assert_eq!(updates[1].delta, expect_update.delta);

    // All decoys is a config error.
    let bad = ThreeDFedConfig { decoy_count: 2, ..cfg };
    assert!(train_3dfed(&cohort, &start, &poisoned, &benign, &bad, 0.05, 10, 8).is_err());
}

#[test]
fn scale_update_is_coordinatewise() {
    let (start, benign) = small_setup(39);
    let mut trained = start.clone();
    run_sgd(&mut trained, &benign, 0.05, 5, 8, &mut CounterRng::new(40)).unwrap();
    let update = ClientUpdate::from_training(0, &start, &trained).unwrap();

    let identity = scale_update(&update, 1.0);
    assert_eq!(identity.delta, update.delta);
    assert_eq!(identity.uploaded_bn_stats, update.uploaded_bn_stats);

    let scaled = scale_update(&update, 10.0);
    for (s, u) in scaled.delta.values.iter().zip(&update.delta.values) {
        assert_eq!(*s, u * 10.0);
    }
}

#[test]
fn gamma_equal_cohort_size_replaces_the_global_model() {
    // FedAVG of one gamma=n scaled malicious delta plus n-1 zero deltas
    // reproduces the malicious model.
    let (start, benign) = small_setup(41);
    let mut malicious = start.clone();
    run_sgd(&mut malicious, &benign, 0.05, 10, 8, &mut CounterRng::new(42)).unwrap();
    let update = ClientUpdate::from_training(0, &start, &malicious).unwrap();
    let n = 4usize;
    let scaled = scale_update(&update, n as f64);
    let zero = fedsim_core::nn::FlatVector::zeros(update.delta.layout.clone());
    let mut deltas = vec![&zero; n - 1];
    deltas.push(&scaled.delta);
    let mean = mean_of(&deltas).unwrap();
    let target = fedsim_core::nn::flatten(&malicious);
    let base = fedsim_core::nn::flatten(&start);
    for ((m, b), t) in mean.values.iter().zip(&base.values).zip(&target.values) {
        assert!((b + m - t).abs() <= 1e-12);
    }
}

#[test]
fn adaptive_attack_degenerates_to_vanilla_without_pretraining() {
    let (start, benign) = small_setup(43);
    let spec = TriggerSpec::corner_block(2);
    let poisoned = build_poison_dataset(&benign, &spec, 15, 44, None).unwrap();
    let cfg = PretrainConfig { iterations: 0, lr: 0.05 };
    let a = adaptive_attack(&start, &benign, &poisoned, &cfg, 0.025, 10, 8, &mut CounterRng::new(45)).unwrap();
    let b = train_vanilla(&start, &poisoned, 0.025, 10, 8, &mut CounterRng::new(45)).unwrap();
    assert_eq!(a, b);

    // Paper defaults for the pre-training stage.
    let d = PretrainConfig::default();
    assert_eq!(d.iterations, 10);
    assert_eq!(d.lr, 0.05);
}

#[test]
fn dba_parts_cover_the_global_pattern() {
    let parent: Vec<fedsim_core::data::PixelSpec> = (0..4)
        .map(|i| fedsim_core::data::PixelSpec { row: 0, col: i, value: 1.0 })
        .collect();
    let parts = assign_dba_parts::<f64>(2, &parent, 1).unwrap();
    assert_eq!(parts.len(), 2);

    let single = assign_dba_parts::<f64>(1, &parent, 1).unwrap();
    let sample = (Tensor::zeros(vec![1, 4, 4]), 0usize);
    let (from_single, _) =
        fedsim_core::data::apply_trigger(&sample, &single[0]).unwrap();
    let global = TriggerSpec {
        pattern: fedsim_core::data::TriggerPattern::Pixel { pixels: parent.clone() },
        target_label: 1,
    };
    let (from_global, _) = fedsim_core::data::apply_trigger(&sample, &global).unwrap();
    assert_eq!(from_single, from_global);

    assert!(assign_dba_parts::<f64>(0, &parent, 1).is_err());
}

#[test]
fn attacks_are_deterministic_under_seed_and_config() {
    let (start, benign) = small_setup(46);
    let spec = TriggerSpec::corner_block(2);
    let poisoned = build_poison_dataset(&benign, &spec, 15, 47, None).unwrap();
    let a = train_vanilla(&start, &poisoned, 0.05, 10, 8, &mut CounterRng::new(48)).unwrap();
    let b = train_vanilla(&start, &poisoned, 0.05, 10, 8, &mut CounterRng::new(48)).unwrap();
    assert_eq!(a, b);
    let c1 = train_neurotoxin(&start, &poisoned, &benign, 0.05, 10, 8, 0.25, &mut CounterRng::new(49)).unwrap();
    let c2 = train_neurotoxin(&start, &poisoned, &benign, 0.05, 10, 8, 0.25, &mut CounterRng::new(49)).unwrap();
    assert_eq!(c1, c2);
}
