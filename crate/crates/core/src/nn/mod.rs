//! Minimal differentiable network stack: dense, 2-D convolution, ReLU,
//! batch normalization with explicit running statistics, flatten.
//!
//! Batch-norm running statistics are first-class state: they can be read,
//! replaced, and restored independently of the learnable parameters, and
//! they never enter the flat parameter view.

mod flat;
pub mod gradcheck;
mod loss;
mod ops;

pub use flat::{apply_delta, flatten, mean_of, unflatten, FlatVector, Layout, LayoutEntry};
pub use loss::{cross_entropy, cross_entropy_grad, supcon_loss_grad};
pub use ops::{backward, backward_from_features, forward_eval, forward_train, sgd_step,
              sgd_step_filtered, ForwardCache, Gradients};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Batch-norm running-statistics momentum: `r <- (1-m)*r + m*batch_stat`.
pub const BN_MOMENTUM: f64 = 0.1;

/// One layer of a [`ModelArch`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { in_features: usize, out_features: usize },
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize },
    Relu,
    BatchNorm { features: usize },
    Flatten,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } | LayerSpec::BatchNorm { .. }
        )
    }
}

/// Network architecture: per-sample input shape plus an ordered layer list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl ModelArch {
    /// Validate layer composition; returns per-layer output shapes
    /// (per-sample, batch dimension excluded).
    pub fn check(&self) -> Result<Vec<Vec<usize>>> {
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument {
                name: "num_classes",
                reason: "must be positive".into(),
            });
        }
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut bn_count = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match layer {
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Dense { in_features, out_features } => {
                    if shape != [*in_features] {
                        return Err(Error::ShapeMismatch {
                            expected: format!("[{in_features}] into dense layer {i}"),
                            got: format!("{shape:?}"),
                        });
                    }
                    vec![*out_features]
                }
                LayerSpec::Conv2d { in_ch, out_ch, kernel, stride } => {
                    if *kernel == 0 || *stride == 0 {
                        return Err(Error::InvalidArgument {
                            name: "conv2d",
                            reason: "kernel and stride must be positive".into(),
                        });
                    }
                    match shape.as_slice() {
                        [ch, h, w] if ch == in_ch && *h >= *kernel && *w >= *kernel => vec![
                            *out_ch,
                            (h - kernel) / stride + 1,
                            (w - kernel) / stride + 1,
                        ],
                        _ => {
                            return Err(Error::ShapeMismatch {
                                expected: format!("[{in_ch}, h>={kernel}, w>={kernel}] into conv layer {i}"),
                                got: format!("{shape:?}"),
                            })
                        }
                    }
                }
                LayerSpec::Relu => shape,
                LayerSpec::BatchNorm { features } => {
                    if shape.first() != Some(features) {
                        return Err(Error::ShapeMismatch {
                            expected: format!("leading dim {features} into batchnorm layer {i}"),
                            got: format!("{shape:?}"),
                        });
                    }
                    bn_count += 1;
                    shape
                }
            };
            shapes.push(shape.clone());
        }
        if shape != [self.num_classes] {
            return Err(Error::ShapeMismatch {
                expected: format!("final logits [{}]", self.num_classes),
                got: format!("{shape:?}"),
            });
        }
        if bn_count == 0 {
            return Err(Error::InvalidArgument {
                name: "layers",
                reason: "at least one batchnorm layer is required".into(),
            });
        }
        Ok(shapes)
    }

    /// Indices of batch-norm layers, in layer order.
    pub fn bn_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, LayerSpec::BatchNorm { .. }).then_some(i))
            .collect()
    }

    /// Feature counts of the batch-norm layers, in layer order.
    pub fn bn_feature_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::BatchNorm { features } => Some(*features),
                _ => None,
            })
            .collect()
    }

    /// Shapes of the learnable tensors of one layer.
    pub fn param_shapes(&self, layer: usize) -> Vec<Vec<usize>> {
        match &self.layers[layer] {
            LayerSpec::Dense { in_features, out_features } => {
                vec![vec![*out_features, *in_features], vec![*out_features]]
            }
            LayerSpec::Conv2d { in_ch, out_ch, kernel, .. } => {
                vec![vec![*out_ch, *in_ch, *kernel, *kernel], vec![*out_ch]]
            }
            LayerSpec::BatchNorm { features } => vec![vec![*features], vec![*features]],
            LayerSpec::Relu | LayerSpec::Flatten => vec![],
        }
    }

    /// Total learnable parameter count.
    pub fn param_count(&self) -> usize {
        (0..self.layers.len())
            .flat_map(|l| self.param_shapes(l))
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Index of the final dense layer, if the arch ends with one.
    pub fn final_dense_layer(&self) -> Option<usize> {
        match self.layers.last() {
            Some(LayerSpec::Dense { .. }) => Some(self.layers.len() - 1),
            _ => None,
        }
    }

    /// Reference MLP: flatten -> dense(hidden) -> BN -> ReLU -> dense(classes).
    pub fn mlp(input_shape: Vec<usize>, hidden: usize, num_classes: usize) -> Self {
        let in_features = input_shape.iter().product();
        ModelArch {
            input_shape,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { in_features, out_features: hidden },
                LayerSpec::BatchNorm { features: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { in_features: hidden, out_features: num_classes },
            ],
            num_classes,
        }
    }

    /// Reference CNN: conv3x3(channels) -> BN -> ReLU -> flatten -> dense(classes).
    pub fn small_cnn(input_shape: Vec<usize>, channels: usize, num_classes: usize) -> Self {
        let (in_ch, h, w) = match input_shape.as_slice() {
            [c, h, w] => (*c, *h, *w),
            _ => (1, 8, 8),
        };
        let oh = h - 3 + 1;
        let ow = w - 3 + 1;
        ModelArch {
            input_shape,
            layers: vec![
                LayerSpec::Conv2d { in_ch, out_ch: channels, kernel: 3, stride: 1 },
                LayerSpec::BatchNorm { features: channels },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { in_features: channels * oh * ow, out_features: num_classes },
            ],
            num_classes,
        }
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BnLayerStats<S: Scalar> {
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
}

/// Running statistics of every batch-norm layer, in layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BnStats<S: Scalar> {
    pub layers: Vec<BnLayerStats<S>>,
    pub momentum: f64,
}

impl<S: Scalar> BnStats<S> {
    /// Fresh statistics: mean 0, variance 1.
    pub fn fresh(arch: &ModelArch) -> Self {
        let layers = arch
            .bn_feature_counts()
            .into_iter()
            .map(|f| BnLayerStats {
                running_mean: vec![S::zero(); f],
                running_var: vec![S::one(); f],
            })
            .collect();
        BnStats { layers, momentum: BN_MOMENTUM }
    }

    /// Check this statistics block fits the architecture.
    pub fn check_layout(&self, arch: &ModelArch) -> Result<()> {
        let feats = arch.bn_feature_counts();
        if feats.len() != self.layers.len() {
            return Err(Error::BnLayoutMismatch(format!(
                "arch has {} batchnorm layers, stats have {}",
                feats.len(),
                self.layers.len()
            )));
        }
        for (i, (f, l)) in feats.iter().zip(&self.layers).enumerate() {
            if l.running_mean.len() != *f || l.running_var.len() != *f {
                return Err(Error::BnLayoutMismatch(format!(
                    "bn layer {i}: expected {f} features, got mean {} / var {}",
                    l.running_mean.len(),
                    l.running_var.len()
                )));
            }
            if l.running_var.iter().any(|v| *v < S::zero()) {
                return Err(Error::BnLayoutMismatch(format!(
                    "bn layer {i}: negative running variance"
                )));
            }
        }
        Ok(())
    }

    /// Element-wise mean of several statistics blocks.
    pub fn mean_of(stats: &[&BnStats<S>]) -> Option<BnStats<S>> {
        let first = stats.first()?;
        let inv = c::<S>(1.0 / stats.len() as f64);
        let mut out = (*first).clone();
        for l in &mut out.layers {
            for v in l.running_mean.iter_mut().chain(l.running_var.iter_mut()) {
                *v = S::zero();
            }
        }
        for s in stats {
            for (acc, l) in out.layers.iter_mut().zip(&s.layers) {
                for (a, b) in acc.running_mean.iter_mut().zip(&l.running_mean) {
                    *a += *b * inv;
                }
                for (a, b) in acc.running_var.iter_mut().zip(&l.running_var) {
                    *a += *b * inv;
                }
            }
        }
        Some(out)
    }
}

/// Learnable parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ModelState<S: Scalar> {
    pub arch: ModelArch,
    /// Per-layer learnable tensors; empty for parameterless layers.
    pub params: Vec<Vec<Tensor<S>>>,
    pub bn_stats: BnStats<S>,
}

impl<S: Scalar> ModelState<S> {
    /// Read the running statistics (cloned; the state is untouched).
    pub fn get_bn_stats(&self) -> BnStats<S> {
        self.bn_stats.clone()
    }

    /// Replace the running statistics; learnable parameters are untouched.
    pub fn set_bn_stats(&mut self, stats: BnStats<S>) -> Result<()> {
        stats.check_layout(&self.arch)?;
        self.bn_stats = stats;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }
}

/// Seeded He-normal initialization; BN gamma 1, beta 0, stats fresh.
pub fn init_model<S: Scalar>(arch: &ModelArch, rng: &mut CounterRng) -> Result<ModelState<S>> {
    arch.check()?;
    let mut params = Vec::with_capacity(arch.layers.len());
    for (i, layer) in arch.layers.iter().enumerate() {
        let tensors = match layer {
            LayerSpec::Dense { in_features, .. } => {
                let shapes = arch.param_shapes(i);
                let std = (2.0 / *in_features as f64).sqrt();
                vec![gaussian_tensor(&shapes[0], std, rng), Tensor::zeros(shapes[1].clone())]
            }
            LayerSpec::Conv2d { in_ch, kernel, .. } => {
                let shapes = arch.param_shapes(i);
                let fan_in = in_ch * kernel * kernel;
                let std = (2.0 / fan_in as f64).sqrt();
                vec![gaussian_tensor(&shapes[0], std, rng), Tensor::zeros(shapes[1].clone())]
            }
            LayerSpec::BatchNorm { features } => vec![
                Tensor::filled(vec![*features], S::one()),
                Tensor::zeros(vec![*features]),
            ],
            LayerSpec::Relu | LayerSpec::Flatten => vec![],
        };
        params.push(tensors);
    }
    Ok(ModelState { arch: arch.clone(), params, bn_stats: BnStats::fresh(arch) })
}

fn gaussian_tensor<S: Scalar>(shape: &[usize], std: f64, rng: &mut CounterRng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| c::<S>(rng.next_gaussian() * std)).collect();
    Tensor::from_parts(shape.to_vec(), values)
}

const CHECKPOINT_FORMAT: &str = "fedsim-model";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct Checkpoint<S: Scalar> {
    format: String,
    version: u32,
    state: ModelState<S>,
}

/// Write a versioned JSON checkpoint (arch + params + bn stats).
/// JSON floats round-trip f64 exactly, so save/load is bit-lossless.
pub fn save_model<S: Scalar>(state: &ModelState<S>, path: &Path) -> Result<()> {
    let cp = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        state: state.clone(),
    };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), &cp)?;
    Ok(())
}

/// Load a checkpoint written by [`save_model`].
pub fn load_model<S: Scalar>(path: &Path) -> Result<ModelState<S>> {
    let file = std::fs::File::open(path)?;
    let cp: Checkpoint<S> = serde_json::from_reader(std::io::BufReader::new(file))?;
    if cp.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", cp.format)));
    }
    if cp.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (supported: {CHECKPOINT_VERSION})",
            cp.version
        )));
    }
    cp.state.bn_stats.check_layout(&cp.state.arch)?;
    Ok(cp.state)
}
