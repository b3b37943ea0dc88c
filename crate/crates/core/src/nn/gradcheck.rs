//! Central finite-difference gradient oracle.
//!
//! Independent of the backward pass by construction: it only evaluates the
//! train-mode forward and the cross-entropy loss on perturbed copies of the
//! state. Used by the gradient-correctness suites.

use crate::error::Result;
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

use super::ops::{forward_train, Gradients};
use super::{cross_entropy, ModelState};

fn loss_at<S: Scalar>(state: &ModelState<S>, x: &Tensor<S>, labels: &[usize]) -> Result<S> {
    let mut probe = state.clone();
    let (logits, _) = forward_train(&mut probe, x)?;
    cross_entropy(&logits, labels)
}

/// Central finite differences of the batch loss w.r.t. every learnable
/// parameter, at the given step size.
pub fn finite_diff_grads<S: Scalar>(
    state: &ModelState<S>,
    x: &Tensor<S>,
    labels: &[usize],
    step: f64,
) -> Result<Gradients<S>> {
    let h = c::<S>(step);
    let two_h = c::<S>(2.0 * step);
    let mut grads = Gradients::zeros_like(state);
    for layer in 0..state.params.len() {
        for tensor in 0..state.params[layer].len() {
            for idx in 0..state.params[layer][tensor].len() {
                let original = state.params[layer][tensor].values()[idx];
                let mut plus = state.clone();
                plus.params[layer][tensor].values_mut()[idx] = original + h;
                let mut minus = state.clone();
                minus.params[layer][tensor].values_mut()[idx] = original - h;
                let lp = loss_at(&plus, x, labels)?;
                let lm = loss_at(&minus, x, labels)?;
                grads.per_layer[layer][tensor].values_mut()[idx] = (lp - lm) / two_h;
            }
        }
    }
    Ok(grads)
}

/// Largest relative error between two gradient sets.
///
/// The denominator is `max(floor, |a|, |b|)` so near-zero coordinates are
/// compared absolutely at scale `floor`.
pub fn max_rel_error<S: Scalar>(a: &Gradients<S>, b: &Gradients<S>, floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (la, lb) in a.per_layer.iter().zip(&b.per_layer) {
        for (ta, tb) in la.iter().zip(lb) {
            for (va, vb) in ta.values().iter().zip(tb.values()) {
                let x = va.as_f64();
                let y = vb.as_f64();
                let denom = floor.max(x.abs()).max(y.abs());
                worst = worst.max((x - y).abs() / denom);
            }
        }
    }
    worst
}
