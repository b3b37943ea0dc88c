//! Datasets: synthesis, IDX files, non-IID partitioning, backdoor triggers,
//! and indicator-dataset construction.

mod idx;
mod indicator;
mod partition;
mod trigger;

pub use idx::{load_idx, save_idx};
pub use indicator::{build_indicator_dataset, IndicatorDataset};
pub use partition::{dirichlet_partition, PartitionPlan};
pub use trigger::{
    apply_trigger, backdoor_eval_set, build_poison_dataset, make_edge_pool, PixelSpec,
    TriggerPattern, TriggerSpec, DEFAULT_BLEND_RATIO,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, CounterRng};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Labeled dataset; all features share one shape, labels sit in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Dataset<S: Scalar> {
    pub name: String,
    pub num_classes: usize,
    samples: Vec<(Tensor<S>, usize)>,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(name: String, num_classes: usize, samples: Vec<(Tensor<S>, usize)>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let shape = first.0.shape().to_vec();
            for (t, label) in &samples {
                if t.shape() != shape {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{shape:?}"),
                        got: format!("{:?}", t.shape()),
                    });
                }
                if *label >= num_classes {
                    return Err(Error::LabelOutOfRange { label: *label, num_classes });
                }
            }
        }
        Ok(Self { name, num_classes, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[(Tensor<S>, usize)] {
        &self.samples
    }

    pub fn feature_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|(t, _)| t.shape())
    }

    pub fn label(&self, index: usize) -> usize {
        self.samples[index].1
    }

    /// Stack the given sample indices into a batch tensor plus label vector.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
        let features: Vec<&Tensor<S>> = indices.iter().map(|&i| &self.samples[i].0).collect();
        let labels = indices.iter().map(|&i| self.samples[i].1).collect();
        Ok((Tensor::stack(&features)?, labels))
    }

    /// Dataset restricted to the given indices (cloned samples).
    pub fn subset(&self, indices: &[usize], name: String) -> Result<Dataset<S>> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Dataset::new(name, self.num_classes, samples)
    }

    /// Indices of each class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, (_, label)) in self.samples.iter().enumerate() {
            by_class[*label].push(i);
        }
        by_class
    }
}

/// Noise level of the synthetic class blobs, relative to unit-scale means.
pub const SYNTH_NOISE_STD: f64 = 0.35;

/// Gaussian class-blob images: one N(0,1) mean pattern per class, samples
/// are mean + N(0, noise) pixels. Deterministic under `seed`.
pub fn gen_synthetic<S: Scalar>(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    seed: u64,
) -> Result<Dataset<S>> {
    let (train, _) = gen_synthetic_split(num_classes, dim, per_class, 0, SYNTH_NOISE_STD, seed)?;
    Ok(train)
}

/// Train/test split from one stream: class means first, then all train
/// samples, then all test samples, so the train side of any split equals
/// [`gen_synthetic`] output for the same arguments.
pub fn gen_synthetic_split<S: Scalar>(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    test_per_class: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(Dataset<S>, Dataset<S>)> {
    if num_classes == 0 || dim == 0 || per_class == 0 {
        return Err(Error::InvalidArgument {
            name: "gen_synthetic",
            reason: "num_classes, dim and per_class must be positive".into(),
        });
    }
    let mut rng = CounterRng::derive(seed, &[purpose::DATAGEN]);
    let pixels = dim * dim;
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..pixels).map(|_| rng.next_gaussian()).collect())
        .collect();
    let name = format!("synthetic(seed={seed},c={num_classes},d={dim})");
    let draw = |count: usize, rng: &mut CounterRng| -> Vec<(Tensor<S>, usize)> {
        let mut samples = Vec::with_capacity(num_classes * count);
        for (class, mean) in means.iter().enumerate() {
            for _ in 0..count {
                let values = mean
                    .iter()
                    .map(|m| c::<S>(m + noise_std * rng.next_gaussian()))
                    .collect();
                samples.push((Tensor::from_parts(vec![1, dim, dim], values), class));
            }
        }
        samples
    };
    let train = Dataset::new(name.clone(), num_classes, draw(per_class, &mut rng))?;
    let test = Dataset::new(name, num_classes, draw(test_per_class, &mut rng))?;
    Ok((train, test))
}

/// Uniform-noise images in `[0, 1)`, all labeled 0. An easy OOD source for
/// indicator datasets.
pub fn gen_noise<S: Scalar>(count: usize, dim: usize, seed: u64) -> Result<Dataset<S>> {
    let mut rng = CounterRng::derive(seed, &[purpose::DATAGEN, 0x6e6f69]);
    let samples = (0..count)
        .map(|_| {
            let values = (0..dim * dim).map(|_| c::<S>(rng.next_f64())).collect();
            (Tensor::from_parts(vec![1, dim, dim], values), 0usize)
        })
        .collect();
    Dataset::new(format!("noise(seed={seed},d={dim})"), 1, samples)
}
