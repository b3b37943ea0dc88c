//! FedAVG orchestration: world building, client selection, local training
//! dispatch, the defense hook, and the per-round ledger.
//!
//! Determinism contract: every random stream is derived from
//! `(master_seed, round, client_id, purpose)` with the counter-based
//! generator, so identical configs produce bit-identical runs at any
//! worker count; workers never share RNG state.

mod config;

pub use config::{
    ArchKind, AttackAlgorithm, AttackSection, BenignConfig, DatasetConfig, DeepsightParams,
    DefenseKind, DefenseSection, ExperimentConfig, FederationConfig, FlameParams, IndicatorParams,
    IndicatorSource, ModelConfig, MultikrumParams, PartitionConfig, RflbatParams, TriggerConfig,
    TriggerKind,
};

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    adaptive_attack, assign_dba_parts, scale_update, train_3dfed, train_chameleon,
    train_neurotoxin, train_pgd, train_vanilla, MaliciousCohort,
};
use crate::data::{
    backdoor_eval_set, build_indicator_dataset, build_poison_dataset, dirichlet_partition,
    gen_noise, gen_synthetic_split, load_idx, make_edge_pool, Dataset, IndicatorDataset,
    PartitionPlan, TriggerPattern, TriggerSpec,
};
use crate::defenses::{
    aggregate_accepted, defend_deepsight, defend_flame, defend_foolsgold, defend_multikrum,
    defend_rflbat, indicator_inject, indicator_inspect, norm_clip, DefenseVerdict,
    FoolsgoldHistory,
};
use crate::error::{Error, Result};
use crate::nn::{init_model, ModelArch};
use crate::rng::{purpose, CounterRng};
use crate::train::{accuracy, run_sgd};
use crate::update::ClientUpdate;
use crate::{ClientId, Model, F};

/// Fixed role of a client for the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientRole {
    Benign,
    Corrupted,
}

/// Client roster: roles, local data shards, and the malicious cohort.
#[derive(Debug, Clone)]
pub struct ClientRegistry {
    pub roles: Vec<ClientRole>,
    pub shards: Vec<Dataset<F>>,
    pub partition: PartitionPlan,
    pub cohort: Vec<ClientId>,
}

impl ClientRegistry {
    pub fn num_clients(&self) -> usize {
        self.roles.len()
    }

    pub fn is_corrupted(&self, id: ClientId) -> bool {
        self.roles[id as usize] == ClientRole::Corrupted
    }
}

/// Everything a run needs besides the evolving global model.
pub struct World {
    pub config: ExperimentConfig,
    pub arch: ModelArch,
    pub train: Dataset<F>,
    pub test: Dataset<F>,
    pub registry: ClientRegistry,
    /// Trigger per cohort member (DBA members hold different parts).
    pub triggers: BTreeMap<ClientId, TriggerSpec<F>>,
    /// Mixed benign+triggered training set per cohort member.
    pub poisoned: BTreeMap<ClientId, Dataset<F>>,
    /// Evaluation set whose accuracy is the backdoor accuracy.
    pub ba_eval: Option<Dataset<F>>,
    pub indicator: Option<IndicatorDataset<F>>,
}

/// Per-round ledger entry. Wall time stays out of serialized logs so that
/// equal seeds produce byte-identical result files; compare records through
/// their serialized form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<ClientId>,
    pub malicious: Vec<ClientId>,
    pub verdict: DefenseVerdict,
    /// Clean test accuracy of the post-aggregation global model.
    pub ma: f64,
    /// Triggered-set accuracy of the post-aggregation global model.
    pub ba: f64,
    #[serde(skip)]
    pub wall_time_ms: f64,
}

/// Completed experiment: ledger plus the final global model.
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub final_model: Model,
}

/// Uniform selection without replacement, with the attacking cohort
/// force-included during active rounds.
pub fn select_clients(
    num_clients: usize,
    count: usize,
    forced: &[ClientId],
    rng: &mut CounterRng,
) -> Result<Vec<ClientId>> {
    if count > num_clients {
        return Err(Error::InvalidArgument {
            name: "count",
            reason: format!("cannot select {count} of {num_clients} clients"),
        });
    }
    if forced.len() > count {
        return Err(Error::InvalidArgument {
            name: "forced",
            reason: "forced cohort exceeds the selection size".into(),
        });
    }
    let mut selected: Vec<ClientId> = forced.to_vec();
    let pool: Vec<ClientId> = (0..num_clients as ClientId)
        .filter(|id| !forced.contains(id))
        .collect();
    let picked = rng.sample_indices(pool.len(), count - forced.len());
    selected.extend(picked.into_iter().map(|i| pool[i]));
    selected.sort_unstable();
    Ok(selected)
}

/// Local benign training: `E_i` SGD iterations from the broadcast model,
/// uploaded as a delta plus the client's running statistics.
pub fn benign_local_train(
    client_id: ClientId,
    broadcast: &Model,
    shard: &Dataset<F>,
    benign: &BenignConfig,
    rng: &mut CounterRng,
) -> Result<ClientUpdate<F>> {
    let mut local = broadcast.clone();
    run_sgd(
        &mut local,
        shard,
        benign.lr,
        benign.local_iterations,
        benign.batch,
        rng,
    )?;
    ClientUpdate::from_training(client_id, broadcast, &local)
}

/// Build datasets, partition, roles, triggers, and the indicator secret.
pub fn build_world(config: &ExperimentConfig) -> Result<World> {
    config.validate()?;
    let (train, test) = match &config.dataset {
        DatasetConfig::Synthetic { classes, dim, per_class, test_per_class, noise_std, seed } => {
            gen_synthetic_split::<F>(*classes, *dim, *per_class, *test_per_class, *noise_std, *seed)?
        }
        DatasetConfig::Idx { images, labels, test_images, test_labels } => {
            let train = load_idx::<F>(Path::new(images), Path::new(labels))?;
            let test = load_idx::<F>(Path::new(test_images), Path::new(test_labels))?;
            (train, test)
        }
    };
    let arch = build_arch(config, &train)?;
    arch.check()?;

    let partition = dirichlet_partition(
        &train,
        config.federation.num_clients,
        config.partition.alpha,
        config.partition.seed,
    )?;
    let shards: Vec<Dataset<F>> = partition
        .assignments
        .iter()
        .enumerate()
        .map(|(i, idx)| train.subset(idx, format!("client-{i}")))
        .collect::<Result<_>>()?;

    // The first cohort_size ids are the corrupted clients.
    let cohort: Vec<ClientId> = match &config.attack {
        Some(attack) => (0..attack.cohort_size as ClientId).collect(),
        None => Vec::new(),
    };
    let roles: Vec<ClientRole> = (0..config.federation.num_clients as ClientId)
        .map(|id| {
            if cohort.contains(&id) {
                ClientRole::Corrupted
            } else {
                ClientRole::Benign
            }
        })
        .collect();
    let registry = ClientRegistry { roles, shards, partition, cohort: cohort.clone() };

    let mut triggers = BTreeMap::new();
    let mut poisoned = BTreeMap::new();
    let mut ba_eval = None;
    if let Some(attack) = &config.attack {
        let shape = train
            .feature_shape()
            .ok_or_else(|| Error::EmptyDataset("training set is empty".into()))?
            .to_vec();

        // The reserved edge pool, split half for poisoning, half for BA.
        let (edge_train, edge_holdout) = if attack.trigger.kind == TriggerKind::Edge {
            let dim = shape[1];
            let pool_src = gen_noise::<F>(attack.trigger.edge_pool_size, dim, attack.trigger.edge_seed)?;
            let pool = make_edge_pool(&pool_src, attack.trigger.target_label, &shape, train.num_classes)?;
            let half = pool.len() / 2;
            let train_half = pool.subset(&(0..half).collect::<Vec<_>>(), "edge-train".into())?;
            let hold_half =
                pool.subset(&(half..pool.len()).collect::<Vec<_>>(), "edge-holdout".into())?;
            (Some(train_half), Some(hold_half))
        } else {
            (None, None)
        };

        let member_specs = cohort_triggers(attack, &cohort, &registry)?;
        for (id, spec) in &member_specs {
            let shard = &registry.shards[*id as usize];
            let mixed = build_poison_dataset(
                shard,
                spec,
                attack.poison_count,
                config.master_seed ^ (*id as u64).wrapping_mul(0x9e37),
                edge_train.as_ref(),
            )?;
            poisoned.insert(*id, mixed);
        }
        triggers = member_specs;

        // BA evaluation set, built once against the held-out test data.
        let first_spec = triggers.values().next().expect("cohort is non-empty");
        let semantic_base = registry.shards.first();
        ba_eval = Some(backdoor_eval_set(
            first_spec,
            &test,
            semantic_base,
            edge_holdout.as_ref(),
        )?);
    }

    let indicator = if config.defense.kind == DefenseKind::Indicator {
        let params = &config.defense.indicator;
        let dim = train
            .feature_shape()
            .map(|s| s[1])
            .ok_or_else(|| Error::EmptyDataset("training set is empty".into()))?;
        let source = match &params.source {
            IndicatorSource::Noise { seed } => gen_noise::<F>(params.size.max(400), dim, *seed)?,
            IndicatorSource::Synthetic { classes, per_class, seed } => {
                crate::data::gen_synthetic::<F>(*classes, dim, *per_class, *seed)?
            }
            IndicatorSource::Idx { images, labels } => {
                load_idx::<F>(Path::new(images), Path::new(labels))?
            }
        };
        Some(build_indicator_dataset(
            &source,
            params.size,
            train.num_classes,
            &train.name,
            params.seed ^ config.master_seed,
            params.force_source,
        )?)
    } else {
        None
    };

    Ok(World {
        config: config.clone(),
        arch,
        train,
        test,
        registry,
        triggers,
        poisoned,
        ba_eval,
        indicator,
    })
}

fn build_arch(config: &ExperimentConfig, train: &Dataset<F>) -> Result<ModelArch> {
    let shape = train
        .feature_shape()
        .ok_or_else(|| Error::EmptyDataset("training set is empty".into()))?
        .to_vec();
    Ok(match config.model.arch {
        ArchKind::Mlp => ModelArch::mlp(shape, config.model.width, train.num_classes),
        ArchKind::SmallCnn => ModelArch::small_cnn(shape, config.model.width, train.num_classes),
    })
}

/// Per-member trigger specs; DBA decomposes the global pattern round-robin.
fn cohort_triggers(
    attack: &AttackSection,
    cohort: &[ClientId],
    registry: &ClientRegistry,
) -> Result<BTreeMap<ClientId, TriggerSpec<F>>> {
    let t = &attack.trigger;
    let pixels = if t.pixels.is_empty() {
        match &TriggerSpec::<F>::corner_block(t.target_label).pattern {
            TriggerPattern::Pixel { pixels } => pixels.clone(),
            _ => unreachable!(),
        }
    } else {
        t.pixels.clone()
    };
    let mut map = BTreeMap::new();
    match t.kind {
        TriggerKind::Pixel => {
            for &id in cohort {
                map.insert(id, TriggerSpec {
                    pattern: TriggerPattern::Pixel { pixels: pixels.clone() },
                    target_label: t.target_label,
                });
            }
        }
        TriggerKind::Dba => {
            let parts = assign_dba_parts::<F>(cohort.len(), &pixels, t.target_label)?;
            for (&id, spec) in cohort.iter().zip(parts) {
                map.insert(id, spec);
            }
        }
        TriggerKind::Blend => {
            let shard = &registry.shards[cohort[0] as usize];
            let shape = shard
                .feature_shape()
                .ok_or_else(|| Error::EmptyDataset("attacker shard is empty".into()))?
                .to_vec();
            let mut rng = CounterRng::derive(t.blend_seed, &[purpose::POISON_BUILD, 0xb1e4d]);
            let len: usize = shape.iter().product();
            let noise = crate::tensor::Tensor::new(
                shape,
                (0..len).map(|_| rng.next_f64()).collect::<Vec<F>>(),
            )?;
            for &id in cohort {
                map.insert(id, TriggerSpec {
                    pattern: TriggerPattern::Blend { noise: noise.clone(), ratio: t.blend_ratio },
                    target_label: t.target_label,
                });
            }
        }
        TriggerKind::Semantic => {
            // The attacker designates the first members of its own shard.
            let shard = &registry.shards[cohort[0] as usize];
            let count = t.semantic_members.min(shard.len());
            let members: Vec<usize> = (0..count).collect();
            for &id in cohort {
                map.insert(id, TriggerSpec {
                    pattern: TriggerPattern::Semantic { member_indices: members.clone() },
                    target_label: t.target_label,
                });
            }
        }
        TriggerKind::Edge => {
            for &id in cohort {
                map.insert(id, TriggerSpec {
                    pattern: TriggerPattern::Edge { pool: "edge".into() },
                    target_label: t.target_label,
                });
            }
        }
    }
    Ok(map)
}

fn attack_window_contains(attack: &AttackSection, round: usize) -> bool {
    round >= attack.start_round && round < attack.start_round + attack.duration
}

struct RoundContext<'w> {
    world: &'w World,
    foolsgold: &'w mut FoolsgoldHistory<F>,
}

/// One FedAVG round: optional indicator injection, broadcast, local
/// training (benign or malicious per the schedule), defense verdict,
/// aggregation, and the ledger record.
fn run_round(
    round: usize,
    global: &Model,
    ctx: &mut RoundContext<'_>,
) -> Result<(Model, RoundRecord)> {
    let started = Instant::now();
    let world = ctx.world;
    let config = &world.config;
    let master = config.master_seed;

    // Indicator injection happens before broadcast.
    let (w_ind, indicator_state) = if config.defense.kind == DefenseKind::Indicator {
        let params = &config.defense.indicator;
        let dataset = world.indicator.as_ref().expect("indicator world is built");
        let mut rng = CounterRng::derive(master, &[round as u64, 0, purpose::INDICATOR]);
        let (w_ind, state) = indicator_inject(
            global,
            dataset,
            params.lambda,
            params.iterations,
            params.lr,
            params.batch,
            params.epsilon_i,
            &mut rng,
        )?;
        (w_ind, Some(state))
    } else {
        (global.clone(), None)
    };

    let attack_active = config
        .attack
        .as_ref()
        .is_some_and(|a| attack_window_contains(a, round));
    let forced: Vec<ClientId> = if attack_active {
        world.registry.cohort.clone()
    } else {
        Vec::new()
    };
    let mut select_rng = CounterRng::derive(master, &[round as u64, purpose::SELECTION]);
    let selected = select_clients(
        config.federation.num_clients,
        config.federation.clients_per_round,
        &forced,
        &mut select_rng,
    )?;
    let malicious: Vec<ClientId> = if attack_active { forced.clone() } else { Vec::new() };

    // Malicious cohort updates (cohort-level algorithms run as one unit).
    let mut updates: Vec<ClientUpdate<F>> = Vec::with_capacity(selected.len());
    if attack_active {
        let attack = config.attack.as_ref().expect("attack_active implies config");
        updates.extend(cohort_updates(round, &w_ind, world, attack)?);
    }

    // Benign clients train in parallel; order is restored by client id.
    let benign_ids: Vec<ClientId> = selected
        .iter()
        .copied()
        .filter(|id| !malicious.contains(id))
        .collect();
    let benign_updates: Vec<ClientUpdate<F>> = benign_ids
        .par_iter()
        .map(|&id| {
            let mut rng =
                CounterRng::derive(master, &[round as u64, id as u64, purpose::CLIENT_TRAIN]);
            benign_local_train(
                id,
                &w_ind,
                &world.registry.shards[id as usize],
                &config.benign,
                &mut rng,
            )
        })
        .collect::<Result<_>>()?;
    updates.extend(benign_updates);
    updates.sort_by_key(|u| u.client_id);

    // NCD hardening ahead of the defense.
    if let Some(bound) = config.defense.ncd_bound {
        updates = norm_clip(&updates, bound)?;
    }

    let verdict = run_defense(round, &updates, &w_ind, indicator_state.as_ref(), ctx)?;
    verdict.check_partition(&selected)?;

    let mut noise_rng = CounterRng::derive(master, &[round as u64, purpose::AGG_NOISE]);
    let next = aggregate_accepted(&w_ind, &updates, &verdict, Some(&mut noise_rng))?;

    let ma = accuracy(&next, &world.test)?;
    let ba = match &world.ba_eval {
        Some(eval) => accuracy(&next, eval)?,
        None => 0.0,
    };
    let record = RoundRecord {
        round,
        selected,
        malicious,
        verdict,
        ma,
        ba,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    Ok((next, record))
}

/// Updates uploaded by the malicious cohort this round.
fn cohort_updates(
    round: usize,
    w_ind: &Model,
    world: &World,
    attack: &AttackSection,
) -> Result<Vec<ClientUpdate<F>>> {
    let cohort_ids = &world.registry.cohort;
    let cohort_seed = world
        .config
        .master_seed
        .wrapping_add((round as u64).wrapping_mul(0x9e37_79b9));

    if attack.algorithm == AttackAlgorithm::Threedfed {
        let cohort = MaliciousCohort { client_ids: cohort_ids.clone(), seed: cohort_seed };
        let first = cohort_ids[0];
        let poisoned = &world.poisoned[&first];
        let benign = &world.registry.shards[first as usize];
        let mut updates = train_3dfed(
            &cohort,
            w_ind,
            poisoned,
            benign,
            &attack.threedfed,
            attack.plr,
            attack.iterations,
            attack.batch,
        )?;
        if attack.scale_gamma > 1.0 {
            updates = updates
                .iter()
                .map(|u| scale_update(u, attack.scale_gamma))
                .collect();
        }
        return Ok(updates);
    }

    cohort_ids
        .iter()
        .map(|&id| {
            let mut rng = CounterRng::derive(
                world.config.master_seed,
                &[round as u64, id as u64, purpose::ATTACK],
            );
            let poisoned = &world.poisoned[&id];
            let benign = &world.registry.shards[id as usize];
            let trained = match attack.algorithm {
                AttackAlgorithm::Vanilla => train_vanilla(
                    w_ind,
                    poisoned,
                    attack.plr,
                    attack.iterations,
                    attack.batch,
                    &mut rng,
                )?,
                AttackAlgorithm::Pgd => train_pgd(
                    w_ind,
                    poisoned,
                    attack.plr,
                    attack.iterations,
                    attack.batch,
                    attack.pgd_radius,
                    &mut rng,
                )?,
                AttackAlgorithm::Neurotoxin => train_neurotoxin(
                    w_ind,
                    poisoned,
                    benign,
                    attack.plr,
                    attack.iterations,
                    attack.batch,
                    attack.neurotoxin_k,
                    &mut rng,
                )?,
                AttackAlgorithm::Chameleon => train_chameleon(
                    w_ind,
                    poisoned,
                    attack.plr,
                    attack.iterations,
                    attack.batch,
                    &mut rng,
                )?,
                AttackAlgorithm::Adaptive => {
                    let pretrain = attack.pretrain.as_ref().expect("validated");
                    adaptive_attack(
                        w_ind,
                        benign,
                        poisoned,
                        pretrain,
                        attack.plr,
                        attack.iterations,
                        attack.batch,
                        &mut rng,
                    )?
                }
                AttackAlgorithm::Threedfed => unreachable!("handled at cohort level"),
            };
            let update = ClientUpdate::from_training(id, w_ind, &trained)?;
            Ok(if attack.scale_gamma > 1.0 {
                scale_update(&update, attack.scale_gamma)
            } else {
                update
            })
        })
        .collect()
}

fn run_defense(
    round: usize,
    updates: &[ClientUpdate<F>],
    w_ind: &Model,
    indicator_state: Option<&crate::defenses::IndicatorState<F>>,
    ctx: &mut RoundContext<'_>,
) -> Result<DefenseVerdict> {
    let config = &ctx.world.config;
    let all: Vec<ClientId> = updates.iter().map(|u| u.client_id).collect();
    Ok(match config.defense.kind {
        DefenseKind::None => DefenseVerdict::accept_all(all),
        DefenseKind::Multikrum => {
            let p = config.defense.multikrum;
            defend_multikrum(updates, p.f, p.m.min(updates.len()))?
        }
        DefenseKind::Deepsight => {
            let p = config.defense.deepsight;
            let seed = config
                .master_seed
                .wrapping_add((round as u64).wrapping_mul(0xdd1f));
            defend_deepsight(updates, w_ind, p.tau_c, p.clip, seed)?
        }
        DefenseKind::Foolsgold => {
            for u in updates {
                ctx.foolsgold.accumulate(u)?;
            }
            defend_foolsgold(updates, ctx.foolsgold)?
        }
        DefenseKind::Rflbat => {
            let p = config.defense.rflbat;
            let seed = config
                .master_seed
                .wrapping_add((round as u64).wrapping_mul(0x4af1));
            defend_rflbat(updates, p.eps1, p.k_clusters, seed)?
        }
        DefenseKind::Flame => {
            let p = config.defense.flame;
            defend_flame(updates, p.eps_dp, p.delta_dp)?
        }
        DefenseKind::Indicator => {
            let state = indicator_state.expect("indicator defense injected this round");
            indicator_inspect(state, updates)?
        }
    })
}

/// Run the configured number of rounds from a seeded initial model.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let world = build_world(config)?;
    let mut global: Model = init_model(
        &world.arch,
        &mut CounterRng::derive(config.master_seed, &[purpose::MODEL_INIT]),
    )?;
    let mut foolsgold = FoolsgoldHistory::default();
    let mut records = Vec::with_capacity(config.federation.total_rounds);
    for round in 1..=config.federation.total_rounds {
        let mut ctx = RoundContext { world: &world, foolsgold: &mut foolsgold };
        let (next, record) = run_round(round, &global, &mut ctx)?;
        log::debug!(
            "round {round}: ma={:.1} ba={:.1} flagged={:?}",
            record.ma,
            record.ba,
            record.verdict.flagged
        );
        global = next;
        records.push(record);
    }
    Ok(ExperimentOutput { records, final_model: global })
}
