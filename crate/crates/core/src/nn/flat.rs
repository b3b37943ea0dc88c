//! Flat view of the learnable parameters.
//!
//! The flatten order is layer-major, tensor-major, row-major element order.
//! BN running statistics never enter the flat view; `unflatten(flatten(s))`
//! reproduces every learnable tensor exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

use super::{ModelArch, ModelState};

/// Location of one learnable tensor inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub layer: usize,
    pub tensor: usize,
    pub offset: usize,
    pub shape: Vec<usize>,
}

/// Ordered (layer, tensor, offset) map for lossless round-trips.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<LayoutEntry>,
    pub total: usize,
}

impl Layout {
    pub fn of(arch: &ModelArch) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0usize;
        for layer in 0..arch.layers.len() {
            for (tensor, shape) in arch.param_shapes(layer).into_iter().enumerate() {
                let len: usize = shape.iter().product();
                entries.push(LayoutEntry { layer, tensor, offset, shape });
                offset += len;
            }
        }
        Layout { entries, total: offset }
    }
}

/// Flat parameter vector plus the layout that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FlatVector<S: Scalar> {
    pub values: Vec<S>,
    pub layout: Layout,
}

impl<S: Scalar> FlatVector<S> {
    pub fn zeros(layout: Layout) -> Self {
        FlatVector { values: vec![S::zero(); layout.total], layout }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_compatible(&self, other: &FlatVector<S>) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::LayoutMismatch(
                "flat vectors come from different architectures".into(),
            ));
        }
        Ok(())
    }

    /// `self - other`.
    pub fn sub(&self, other: &FlatVector<S>) -> Result<FlatVector<S>> {
        self.check_compatible(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| *a - *b)
            .collect();
        Ok(FlatVector { values, layout: self.layout.clone() })
    }

    /// `self + other`.
    pub fn add(&self, other: &FlatVector<S>) -> Result<FlatVector<S>> {
        self.check_compatible(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| *a + *b)
            .collect();
        Ok(FlatVector { values, layout: self.layout.clone() })
    }

    pub fn add_assign_scaled(&mut self, other: &FlatVector<S>, scale: S) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: S) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn l2_norm(&self) -> S {
        self.values.iter().map(|v| *v * *v).sum::<S>().sqrt()
    }

    pub fn dot(&self, other: &FlatVector<S>) -> S {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| *a * *b)
            .sum()
    }

    /// Cosine similarity in f64; zero if either vector has zero norm.
    pub fn cosine(&self, other: &FlatVector<S>) -> f64 {
        let dot = self.dot(other).as_f64();
        let na = self.l2_norm().as_f64();
        let nb = other.l2_norm().as_f64();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }

    /// Slice covering one learnable tensor of one layer, by layout lookup.
    pub fn tensor_slice(&self, layer: usize, tensor: usize) -> Option<&[S]> {
        self.layout
            .entries
            .iter()
            .find(|e| e.layer == layer && e.tensor == tensor)
            .map(|e| {
                let len: usize = e.shape.iter().product();
                &self.values[e.offset..e.offset + len]
            })
    }
}

/// Flatten all learnable parameters (BN running stats excluded).
pub fn flatten<S: Scalar>(state: &ModelState<S>) -> FlatVector<S> {
    let layout = Layout::of(&state.arch);
    let mut values = Vec::with_capacity(layout.total);
    for tensors in &state.params {
        for t in tensors {
            values.extend_from_slice(t.values());
        }
    }
    debug_assert_eq!(values.len(), layout.total);
    FlatVector { values, layout }
}

/// Rebuild per-layer parameter tensors from a flat vector.
pub fn unflatten<S: Scalar>(flat: &FlatVector<S>, arch: &ModelArch) -> Result<Vec<Vec<Tensor<S>>>> {
    let expected = Layout::of(arch);
    if flat.layout != expected {
        return Err(Error::LayoutMismatch(format!(
            "layout has {} entries / {} values, arch wants {} / {}",
            flat.layout.entries.len(),
            flat.layout.total,
            expected.entries.len(),
            expected.total
        )));
    }
    let mut params: Vec<Vec<Tensor<S>>> = (0..arch.layers.len()).map(|_| Vec::new()).collect();
    for entry in &flat.layout.entries {
        let len: usize = entry.shape.iter().product();
        let values = flat.values[entry.offset..entry.offset + len].to_vec();
        params[entry.layer].push(Tensor::from_parts(entry.shape.clone(), values));
    }
    Ok(params)
}

/// Replace the learnable parameters of `state` with `base + delta`.
pub fn apply_delta<S: Scalar>(
    state: &ModelState<S>,
    delta: &FlatVector<S>,
) -> Result<ModelState<S>> {
    let base = flatten(state);
    let combined = base.add(delta)?;
    let params = unflatten(&combined, &state.arch)?;
    Ok(ModelState {
        arch: state.arch.clone(),
        params,
        bn_stats: state.bn_stats.clone(),
    })
}

/// Convenience: mean of several compatible flat vectors.
pub fn mean_of<S: Scalar>(vectors: &[&FlatVector<S>]) -> Result<FlatVector<S>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::EmptyDataset("mean of zero vectors".into()))?;
    let mut acc = FlatVector::zeros(first.layout.clone());
    let inv = c::<S>(1.0 / vectors.len() as f64);
    for v in vectors {
        acc.add_assign_scaled(v, inv)?;
    }
    Ok(acc)
}
