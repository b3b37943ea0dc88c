//! Backdoor triggers: declarative specs and their application to samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, CounterRng};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

use super::Dataset;

/// Default blend ratio when a config does not set one.
pub const DEFAULT_BLEND_RATIO: f64 = 0.2;

/// One overwritten pixel: `(row, col) <- value` on every channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelSpec {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// The input transformation (or membership rule) of a backdoor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", tag = "kind", rename_all = "snake_case")]
pub enum TriggerPattern<S: Scalar> {
    /// Overwrite the listed coordinates with the listed values.
    Pixel { pixels: Vec<PixelSpec> },
    /// `x' = (1 - ratio) * x + ratio * noise`.
    Blend { noise: Tensor<S>, ratio: f64 },
    /// Membership backdoor: the designated benign samples, features unchanged.
    Semantic { member_indices: Vec<usize> },
    /// Membership backdoor drawn from a reserved OOD pool.
    Edge { pool: String },
    /// One part of a decomposed global pixel pattern: pixel `i` of the
    /// parent belongs to part `i % part_count`.
    DbaLocal { parent: Vec<PixelSpec>, part_index: usize, part_count: usize },
}

/// A backdoor: pattern plus the target label every triggered sample maps to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TriggerSpec<S: Scalar> {
    pub pattern: TriggerPattern<S>,
    pub target_label: usize,
}

impl<S: Scalar> TriggerSpec<S> {
    /// The default pixel trigger: a 3x3 corner block of value 1.0.
    pub fn corner_block(target_label: usize) -> Self {
        let pixels = (0..3)
            .flat_map(|r| (0..3).map(move |c| PixelSpec { row: r, col: c, value: 1.0 }))
            .collect();
        TriggerSpec { pattern: TriggerPattern::Pixel { pixels }, target_label }
    }

    pub fn validate(&self, feature_shape: &[usize], num_classes: usize) -> Result<()> {
        if self.target_label >= num_classes {
            return Err(Error::LabelOutOfRange { label: self.target_label, num_classes });
        }
        let (h, w) = image_dims(feature_shape)?;
        match &self.pattern {
            TriggerPattern::Pixel { pixels } => check_pixels(pixels, h, w),
            TriggerPattern::Blend { noise, ratio } => {
                if !(*ratio > 0.0 && *ratio <= 1.0) {
                    return Err(Error::InvalidArgument {
                        name: "blend.ratio",
                        reason: format!("{ratio} outside (0, 1]"),
                    });
                }
                if noise.shape() != feature_shape {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{feature_shape:?}"),
                        got: format!("{:?}", noise.shape()),
                    });
                }
                Ok(())
            }
            TriggerPattern::Semantic { .. } | TriggerPattern::Edge { .. } => Ok(()),
            TriggerPattern::DbaLocal { parent, part_index, part_count } => {
                if *part_count == 0 || part_index >= part_count {
                    return Err(Error::InvalidArgument {
                        name: "dba_local",
                        reason: format!("part {part_index} of {part_count}"),
                    });
                }
                check_pixels(parent, h, w)
            }
        }
    }
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [_, h, w] => Ok((*h, *w)),
        other => Err(Error::ShapeMismatch {
            expected: "[channels, rows, cols] features".into(),
            got: format!("{other:?}"),
        }),
    }
}

fn check_pixels(pixels: &[PixelSpec], h: usize, w: usize) -> Result<()> {
    for p in pixels {
        if p.row >= h || p.col >= w {
            return Err(Error::TriggerOutOfBounds { row: p.row, col: p.col, height: h, width: w });
        }
    }
    Ok(())
}

fn overwrite_pixels<S: Scalar>(features: &mut Tensor<S>, pixels: &[PixelSpec]) {
    let (channels, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    debug_assert!(h > 0 && w > 0);
    let values = features.values_mut();
    for p in pixels {
        for ch in 0..channels {
            values[(ch * h + p.row) * w + p.col] = c::<S>(p.value);
        }
    }
}

/// Apply a trigger to one sample. The input is never modified; pixel and
/// blend triggers transform the features, membership triggers only relabel.
pub fn apply_trigger<S: Scalar>(
    sample: &(Tensor<S>, usize),
    spec: &TriggerSpec<S>,
) -> Result<(Tensor<S>, usize)> {
    let (h, w) = image_dims(sample.0.shape())?;
    let mut features = sample.0.clone();
    match &spec.pattern {
        TriggerPattern::Pixel { pixels } => {
            check_pixels(pixels, h, w)?;
            overwrite_pixels(&mut features, pixels);
        }
        TriggerPattern::Blend { noise, ratio } => {
            let beta = c::<S>(*ratio);
            let keep = S::one() - beta;
            for (x, n) in features.values_mut().iter_mut().zip(noise.values()) {
                *x = keep * *x + beta * *n;
            }
        }
        TriggerPattern::Semantic { .. } | TriggerPattern::Edge { .. } => {}
        TriggerPattern::DbaLocal { parent, part_index, part_count } => {
            let part: Vec<PixelSpec> = parent
                .iter()
                .enumerate()
                .filter(|(i, _)| i % part_count == *part_index)
                .map(|(_, p)| *p)
                .collect();
            check_pixels(&part, h, w)?;
            overwrite_pixels(&mut features, &part);
        }
    }
    Ok((features, spec.target_label))
}

/// Mix `benign` with `count` triggered samples, deterministically shuffled.
///
/// Pixel/blend/DBA triggers draw their carrier images from the benign set
/// (without replacement while possible); semantic triggers draw from the
/// designated member set; edge triggers draw from the reserved pool.
pub fn build_poison_dataset<S: Scalar>(
    benign: &Dataset<S>,
    spec: &TriggerSpec<S>,
    count: usize,
    seed: u64,
    edge_pool: Option<&Dataset<S>>,
) -> Result<Dataset<S>> {
    let shape = benign
        .feature_shape()
        .ok_or_else(|| Error::EmptyDataset("benign dataset is empty".into()))?;
    spec.validate(shape, benign.num_classes)?;
    let mut rng = CounterRng::derive(seed, &[purpose::POISON_BUILD]);

    let mut samples: Vec<(Tensor<S>, usize)> = benign.samples().to_vec();
    match &spec.pattern {
        TriggerPattern::Semantic { member_indices } => {
            if count > member_indices.len() {
                return Err(Error::InvalidArgument {
                    name: "poison_count",
                    reason: format!(
                        "{count} exceeds the semantic member set of {}",
                        member_indices.len()
                    ),
                });
            }
            for &i in member_indices.iter().take(count) {
                if i >= benign.len() {
                    return Err(Error::InvalidArgument {
                        name: "member_indices",
                        reason: format!("index {i} out of range"),
                    });
                }
                samples.push(apply_trigger(&benign.samples()[i], spec)?);
            }
        }
        TriggerPattern::Edge { .. } => {
            let pool = edge_pool.ok_or_else(|| Error::InvalidArgument {
                name: "edge_pool",
                reason: "edge trigger needs a reserved pool".into(),
            })?;
            if count > pool.len() {
                return Err(Error::InvalidArgument {
                    name: "poison_count",
                    reason: format!("{count} exceeds the edge pool of {}", pool.len()),
                });
            }
            if pool.feature_shape() != Some(shape) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{shape:?}"),
                    got: format!("{:?}", pool.feature_shape()),
                });
            }
            let picked = rng.sample_indices(pool.len(), count);
            for i in picked {
                // Pool samples are already relabeled to the target.
                samples.push(pool.samples()[i].clone());
            }
        }
        _ => {
            let mut order: Vec<usize> = (0..benign.len()).collect();
            rng.shuffle(&mut order);
            for j in 0..count {
                let i = order[j % order.len()];
                samples.push(apply_trigger(&benign.samples()[i], spec)?);
            }
        }
    }
    rng.shuffle(&mut samples);
    Dataset::new(
        format!("{}+poison", benign.name),
        benign.num_classes,
        samples,
    )
}

/// Evaluation set whose accuracy is the backdoor accuracy (BA).
///
/// Pixel/blend/DBA: clean test samples whose true label differs from the
/// target, with the trigger applied (the full parent pattern for DBA).
/// Semantic: the member samples from the attacker's base set, relabeled.
/// Edge: the held-out slice of the reserved pool (already relabeled).
pub fn backdoor_eval_set<S: Scalar>(
    spec: &TriggerSpec<S>,
    clean_test: &Dataset<S>,
    semantic_base: Option<&Dataset<S>>,
    edge_holdout: Option<&Dataset<S>>,
) -> Result<Dataset<S>> {
    match &spec.pattern {
        TriggerPattern::Semantic { member_indices } => {
            let base = semantic_base.ok_or_else(|| Error::InvalidArgument {
                name: "semantic_base",
                reason: "semantic BA needs the attacker's base dataset".into(),
            })?;
            let samples = member_indices
                .iter()
                .map(|&i| {
                    base.samples()
                        .get(i)
                        .map(|(t, _)| (t.clone(), spec.target_label))
                        .ok_or_else(|| Error::InvalidArgument {
                            name: "member_indices",
                            reason: format!("index {i} out of range"),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            Dataset::new("ba-eval(semantic)".into(), base.num_classes, samples)
        }
        TriggerPattern::Edge { .. } => {
            let holdout = edge_holdout.ok_or_else(|| Error::InvalidArgument {
                name: "edge_holdout",
                reason: "edge BA needs the held-out pool slice".into(),
            })?;
            Ok(holdout.clone())
        }
        _ => {
            let eval_spec = match &spec.pattern {
                TriggerPattern::DbaLocal { parent, .. } => TriggerSpec {
                    pattern: TriggerPattern::Pixel { pixels: parent.clone() },
                    target_label: spec.target_label,
                },
                _ => spec.clone(),
            };
            let samples = clean_test
                .samples()
                .iter()
                .filter(|(_, label)| *label != spec.target_label)
                .map(|s| apply_trigger(s, &eval_spec))
                .collect::<Result<Vec<_>>>()?;
            Dataset::new(
                "ba-eval(triggered)".into(),
                clean_test.num_classes,
                samples,
            )
        }
    }
}

/// Relabel an OOD dataset to the attack target, reserving it as the edge
/// pool. The pool never enters benign partitions.
pub fn make_edge_pool<S: Scalar>(
    ood: &Dataset<S>,
    target_label: usize,
    expected_shape: &[usize],
    num_classes: usize,
) -> Result<Dataset<S>> {
    if ood.is_empty() {
        return Err(Error::EmptyDataset("edge pool source is empty".into()));
    }
    if ood.feature_shape() != Some(expected_shape) {
        return Err(Error::ShapeMismatch {
            expected: format!("{expected_shape:?}"),
            got: format!("{:?}", ood.feature_shape()),
        });
    }
    if target_label >= num_classes {
        return Err(Error::LabelOutOfRange { label: target_label, num_classes });
    }
    let samples = ood
        .samples()
        .iter()
        .map(|(t, _)| (t.clone(), target_label))
        .collect();
    Dataset::new(format!("edge-pool({})", ood.name), num_classes, samples)
}
