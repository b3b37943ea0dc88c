//! Experiment configuration: the TOML-facing schema with documented
//! defaults and field-naming validation errors.

use serde::{Deserialize, Serialize};

use crate::attacks::{PretrainConfig, ThreeDFedConfig};
use crate::error::{Error, Result};

fn err(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig { field: field.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every random stream in the run.
    pub master_seed: u64,
    pub federation: FederationConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub benign: BenignConfig,
    #[serde(default)]
    pub attack: Option<AttackSection>,
    #[serde(default)]
    pub defense: DefenseSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub total_rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct ModelConfig {
    /// `mlp` or `small_cnn`.
    pub arch: ArchKind,
    /// Hidden width (mlp) or channel count (small_cnn).
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { arch: ArchKind::Mlp, width: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    SmallCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Gaussian class blobs.
    Synthetic {
        classes: usize,
        dim: usize,
        per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_noise_std")]
        noise_std: f64,
        seed: u64,
    },
    /// IDX image/label pairs on disk.
    Idx {
        images: String,
        labels: String,
        test_images: String,
        test_labels: String,
    },
}

fn default_test_per_class() -> usize {
    20
}

fn default_noise_std() -> f64 {
    crate::data::SYNTH_NOISE_STD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub alpha: f64,
    pub seed: u64,
}

impl Default for PartitionConfig {
    // alpha 0.2 mirrors the severe-heterogeneity setting.
    fn default() -> Self {
        PartitionConfig { alpha: 0.2, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenignConfig {
    pub local_iterations: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for BenignConfig {
    // 2 iterations at 0.05: the baseline benign client.
    fn default() -> Self {
        BenignConfig { local_iterations: 2, lr: 0.05, batch: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub algorithm: AttackAlgorithm,
    /// First round of the poisoning window (1-based).
    pub start_round: usize,
    /// Window length in rounds.
    pub duration: usize,
    #[serde(default = "default_cohort")]
    pub cohort_size: usize,
    /// Poisoned learning rate.
    pub plr: f64,
    pub iterations: usize,
    #[serde(default = "default_attack_batch")]
    pub batch: usize,
    pub poison_count: usize,
    #[serde(default = "default_gamma")]
    pub scale_gamma: f64,
    #[serde(default = "default_radius")]
    pub pgd_radius: f64,
    #[serde(default = "default_k")]
    pub neurotoxin_k: f64,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub threedfed: ThreeDFedConfig,
    pub trigger: TriggerConfig,
}

fn default_cohort() -> usize {
    1
}

fn default_attack_batch() -> usize {
    64
}

fn default_gamma() -> f64 {
    1.0
}

fn default_radius() -> f64 {
    f64::INFINITY
}

fn default_k() -> f64 {
    0.25
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackAlgorithm {
    Vanilla,
    Pgd,
    Neurotoxin,
    Chameleon,
    Threedfed,
    /// Adaptive pre-training attack: benign erase phase, then vanilla.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerConfig {
    pub kind: TriggerKind,
    pub target_label: usize,
    /// Pixel pattern; empty means the default 3x3 corner block. For `dba`
    /// this is the global pattern decomposed across the cohort.
    #[serde(default)]
    pub pixels: Vec<crate::data::PixelSpec>,
    #[serde(default = "default_blend_ratio")]
    pub blend_ratio: f64,
    #[serde(default)]
    pub blend_seed: u64,
    /// Semantic: how many of the attacker's own samples form the member set.
    #[serde(default = "default_semantic_members")]
    pub semantic_members: usize,
    /// Edge: seed and size of the reserved OOD pool (half train, half eval).
    #[serde(default)]
    pub edge_seed: u64,
    #[serde(default = "default_edge_pool")]
    pub edge_pool_size: usize,
}

fn default_blend_ratio() -> f64 {
    crate::data::DEFAULT_BLEND_RATIO
}

fn default_semantic_members() -> usize {
    20
}

fn default_edge_pool() -> usize {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    Pixel,
    Blend,
    Semantic,
    Edge,
    Dba,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    pub kind: DefenseKind,
    #[serde(default)]
    pub multikrum: MultikrumParams,
    #[serde(default)]
    pub deepsight: DeepsightParams,
    #[serde(default)]
    pub rflbat: RflbatParams,
    #[serde(default)]
    pub flame: FlameParams,
    #[serde(default)]
    pub indicator: IndicatorParams,
    /// Norm-clipping bound applied to every received update before the
    /// defense (the NCD hardening); `none` disables it.
    #[serde(default)]
    pub ncd_bound: Option<f64>,
}

impl Default for DefenseSection {
    fn default() -> Self {
        DefenseSection {
            kind: DefenseKind::None,
            multikrum: MultikrumParams::default(),
            deepsight: DeepsightParams::default(),
            rflbat: RflbatParams::default(),
            flame: FlameParams::default(),
            indicator: IndicatorParams::default(),
            ncd_bound: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    None,
    Multikrum,
    Deepsight,
    Foolsgold,
    Rflbat,
    Flame,
    Indicator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultikrumParams {
    pub f: usize,
    pub m: usize,
}

impl Default for MultikrumParams {
    fn default() -> Self {
        MultikrumParams { f: 1, m: 6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepsightParams {
    pub tau_c: f64,
    pub clip: bool,
}

impl Default for DeepsightParams {
    fn default() -> Self {
        DeepsightParams { tau_c: 0.5, clip: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RflbatParams {
    pub eps1: f64,
    pub k_clusters: usize,
}

impl Default for RflbatParams {
    fn default() -> Self {
        RflbatParams { eps1: 2.0, k_clusters: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlameParams {
    pub eps_dp: f64,
    pub delta_dp: f64,
}

impl Default for FlameParams {
    // Desk-scale budget: mild noise relative to update norms.
    fn default() -> Self {
        FlameParams { eps_dp: 100.0, delta_dp: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndicatorParams {
    pub source: IndicatorSource,
    pub size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub lambda: f64,
    pub epsilon_i: f64,
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    /// Override the disjointness check between the indicator source and the
    /// benign dataset names.
    #[serde(default)]
    pub force_source: bool,
}

impl Default for IndicatorParams {
    // Size 800, 200 iterations, lambda 0.1, threshold 95 are the reference
    // settings; the injection learning rate defaults to 0.01.
    fn default() -> Self {
        IndicatorParams {
            source: IndicatorSource::Noise { seed: 990 },
            size: 800,
            iterations: 200,
            lr: 0.01,
            lambda: 0.1,
            epsilon_i: 95.0,
            batch: 64,
            seed: 0,
            force_source: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum IndicatorSource {
    /// Uniform random images.
    Noise { seed: u64 },
    /// Class blobs drawn with a different seed than the main task.
    Synthetic { classes: usize, per_class: usize, seed: u64 },
    /// IDX pair on disk.
    Idx { images: String, labels: String },
}

impl ExperimentConfig {
    /// Validate cross-field invariants, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let fed = &self.federation;
        if fed.num_clients == 0 {
            return Err(err("federation.num_clients", "must be positive"));
        }
        if fed.clients_per_round == 0 || fed.clients_per_round > fed.num_clients {
            return Err(err(
                "federation.clients_per_round",
                format!(
                    "{} must be in 1..={}",
                    fed.clients_per_round, fed.num_clients
                ),
            ));
        }
        if self.model.width == 0 {
            return Err(err("model.width", "must be positive"));
        }
        match &self.dataset {
            DatasetConfig::Synthetic { classes, dim, per_class, noise_std, .. } => {
                if *classes < 2 {
                    return Err(err("dataset.classes", "need at least 2 classes"));
                }
                if *dim < 4 {
                    return Err(err("dataset.dim", "images smaller than 4x4 break the reference archs"));
                }
                if *per_class == 0 {
                    return Err(err("dataset.per_class", "must be positive"));
                }
                if *noise_std <= 0.0 {
                    return Err(err("dataset.noise_std", "must be positive"));
                }
            }
            DatasetConfig::Idx { images, labels, test_images, test_labels } => {
                for (field, path) in [
                    ("dataset.images", images),
                    ("dataset.labels", labels),
                    ("dataset.test_images", test_images),
                    ("dataset.test_labels", test_labels),
                ] {
                    if path.is_empty() {
                        return Err(err(field, "path is empty"));
                    }
                }
            }
        }
        if self.partition.alpha <= 0.0 {
            return Err(err("partition.alpha", "Dirichlet concentration must be positive"));
        }
        if self.benign.lr <= 0.0 {
            return Err(err("benign.lr", "must be positive"));
        }
        if self.benign.batch == 0 {
            return Err(err("benign.batch", "must be positive"));
        }
        if let Some(attack) = &self.attack {
            if attack.start_round < 1 {
                return Err(err("attack.start_round", "rounds are 1-based"));
            }
            if attack.cohort_size == 0 {
                return Err(err("attack.cohort_size", "must be positive"));
            }
            if attack.cohort_size > self.federation.clients_per_round {
                return Err(err(
                    "attack.cohort_size",
                    format!(
                        "{} exceeds clients_per_round {}",
                        attack.cohort_size, self.federation.clients_per_round
                    ),
                ));
            }
            if attack.plr <= 0.0 {
                return Err(err("attack.plr", "must be positive"));
            }
            if attack.scale_gamma < 1.0 {
                return Err(err("attack.scale_gamma", "replacement scale is at least 1"));
            }
            if attack.pgd_radius <= 0.0 {
                return Err(err("attack.pgd_radius", "must be positive"));
            }
            if !(attack.neurotoxin_k > 0.0 && attack.neurotoxin_k < 1.0) {
                return Err(err("attack.neurotoxin_k", "must sit in (0, 1)"));
            }
            if attack.threedfed.decoy_count >= attack.cohort_size {
                return Err(err(
                    "attack.threedfed.decoy_count",
                    "decoys must leave at least one backdoor member",
                ));
            }
            if attack.algorithm == AttackAlgorithm::Adaptive && attack.pretrain.is_none() {
                return Err(err("attack.pretrain", "adaptive attack needs a pretrain table"));
            }
            let num_classes = self.num_classes();
            if attack.trigger.target_label >= num_classes {
                return Err(err(
                    "attack.trigger.target_label",
                    format!("label {} out of {num_classes} classes", attack.trigger.target_label),
                ));
            }
            if attack.trigger.kind == TriggerKind::Blend
                && !(attack.trigger.blend_ratio > 0.0 && attack.trigger.blend_ratio <= 1.0)
            {
                return Err(err("attack.trigger.blend_ratio", "must sit in (0, 1]"));
            }
        }
        if self.defense.kind == DefenseKind::Indicator {
            let ind = &self.defense.indicator;
            if ind.size == 0 {
                return Err(err("defense.indicator.size", "must be positive"));
            }
            if ind.iterations == 0 {
                return Err(err("defense.indicator.iterations", "must be positive"));
            }
            if !(0.0..=100.0).contains(&ind.epsilon_i) {
                return Err(err("defense.indicator.epsilon_i", "threshold lives in [0, 100]"));
            }
            if ind.lr <= 0.0 {
                return Err(err("defense.indicator.lr", "must be positive"));
            }
            if ind.lambda < 0.0 {
                return Err(err("defense.indicator.lambda", "must be non-negative"));
            }
        }
        if let Some(bound) = self.defense.ncd_bound {
            if bound <= 0.0 {
                return Err(err("defense.ncd_bound", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Synthetic { classes, .. } => *classes,
            // IDX datasets discover the class count at load time; this is
            // only used for config-time label validation.
            DatasetConfig::Idx { .. } => usize::MAX,
        }
    }
}
