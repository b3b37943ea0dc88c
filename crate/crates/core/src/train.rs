//! Shared mini-batch SGD loops and eval-mode accuracy helpers.
//!
//! Benign clients, attackers, and the server-side indicator injection all
//! run through [`run_sgd`] / [`run_sgd_prox`], so identical seeds produce
//! identical trajectories regardless of who is training.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{backward, flatten, forward_eval, forward_train, sgd_step,
                FlatVector, Gradients, ModelState};
use crate::rng::CounterRng;
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Draw a mini-batch of distinct sample indices; the whole dataset when the
/// batch size covers it.
pub fn sample_batch(rng: &mut CounterRng, n: usize, batch: usize) -> Vec<usize> {
    if batch >= n {
        (0..n).collect()
    } else {
        rng.sample_indices(n, batch)
    }
}

/// Plain mini-batch SGD for `iters` iterations.
pub fn run_sgd<S: Scalar>(
    state: &mut ModelState<S>,
    ds: &Dataset<S>,
    lr: f64,
    iters: usize,
    batch: usize,
    rng: &mut CounterRng,
) -> Result<()> {
    run_sgd_inner(state, ds, lr, iters, batch, rng, None, |_, _| Ok(()))
}

/// Mini-batch SGD with a proximal pull toward `anchor`: the loss carries an
/// extra `lambda * |w - anchor|_2` term (subgradient 0 at `w = anchor`).
pub fn run_sgd_prox<S: Scalar>(
    state: &mut ModelState<S>,
    ds: &Dataset<S>,
    lr: f64,
    iters: usize,
    batch: usize,
    lambda: f64,
    anchor: &FlatVector<S>,
    rng: &mut CounterRng,
) -> Result<()> {
    run_sgd_inner(state, ds, lr, iters, batch, rng, Some((lambda, anchor)), |_, _| Ok(()))
}

/// SGD with a caller hook that runs after every step (used by projection
/// and coordinate-freezing attacks).
pub fn run_sgd_with_hook<S: Scalar>(
    state: &mut ModelState<S>,
    ds: &Dataset<S>,
    lr: f64,
    iters: usize,
    batch: usize,
    rng: &mut CounterRng,
    hook: impl FnMut(&mut ModelState<S>, usize) -> Result<()>,
) -> Result<()> {
    run_sgd_inner(state, ds, lr, iters, batch, rng, None, hook)
}

fn run_sgd_inner<S: Scalar>(
    state: &mut ModelState<S>,
    ds: &Dataset<S>,
    lr: f64,
    iters: usize,
    batch: usize,
    rng: &mut CounterRng,
    prox: Option<(f64, &FlatVector<S>)>,
    mut hook: impl FnMut(&mut ModelState<S>, usize) -> Result<()>,
) -> Result<()> {
    if iters == 0 {
        return Ok(());
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset("cannot train on an empty dataset".into()));
    }
    if batch == 0 {
        return Err(Error::InvalidArgument {
            name: "batch",
            reason: "batch size must be positive".into(),
        });
    }
    for iter in 0..iters {
        // Train-mode BN needs at least two samples per step.
        let indices = sample_batch(rng, ds.len(), batch.max(2));
        let (x, labels) = ds.batch(&indices)?;
        let (_, cache) = forward_train(state, &x)?;
        let mut grads = backward(state, &cache, &labels)?;
        if let Some((lambda, anchor)) = prox {
            add_prox_gradient(state, &mut grads, lambda, lr, anchor)?;
        }
        sgd_step(state, &grads, c::<S>(lr))?;
        hook(state, iter)?;
    }
    Ok(())
}

/// Gradient of `lambda * |w - anchor|_2`: `lambda * (w - anchor) / |w - anchor|`,
/// with the subgradient taken as 0 at the anchor. The per-step pull is capped
/// at the remaining distance (the proximal step of the norm penalty), so the
/// penalty can recapture the anchor but never overshoot it; below the cap this
/// is exactly the subgradient step.
fn add_prox_gradient<S: Scalar>(
    state: &ModelState<S>,
    grads: &mut Gradients<S>,
    lambda: f64,
    lr: f64,
    anchor: &FlatVector<S>,
) -> Result<()> {
    if lambda == 0.0 {
        return Ok(());
    }
    let current = flatten(state);
    let diff = current.sub(anchor)?;
    let norm = diff.l2_norm().as_f64();
    if norm > 0.0 {
        let effective = lambda.min(norm / lr);
        grads.add_flat_scaled(&diff.values, c::<S>(effective / norm));
    }
    Ok(())
}

/// Eval-mode top-1 accuracy in percent.
pub fn accuracy<S: Scalar>(state: &ModelState<S>, ds: &Dataset<S>) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in index_chunks(ds.len(), 256) {
        let (x, labels) = ds.batch(&chunk)?;
        let logits = forward_eval(state, &x)?;
        correct += count_correct(&logits, &labels);
    }
    Ok(100.0 * correct as f64 / ds.len() as f64)
}

/// Eval-mode accuracy per class label, in percent; classes with no samples
/// report 0.
pub fn per_label_accuracy<S: Scalar>(
    state: &ModelState<S>,
    samples: &[(Tensor<S>, usize)],
    num_classes: usize,
) -> Result<Vec<f64>> {
    let mut correct = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for chunk in index_chunks(samples.len(), 256) {
        let features: Vec<&Tensor<S>> = chunk.iter().map(|&i| &samples[i].0).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].1).collect();
        let x = Tensor::stack(&features)?;
        let logits = forward_eval(state, &x)?;
        let classes = logits.shape()[1];
        for (row, &label) in labels.iter().enumerate() {
            total[label] += 1;
            if argmax(&logits.values()[row * classes..(row + 1) * classes]) == label {
                correct[label] += 1;
            }
        }
    }
    Ok((0..num_classes)
        .map(|k| {
            if total[k] == 0 {
                0.0
            } else {
                100.0 * correct[k] as f64 / total[k] as f64
            }
        })
        .collect())
}

fn index_chunks(n: usize, chunk: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n.div_ceil(chunk)).map(move |c| {
        let start = c * chunk;
        (start..(start + chunk).min(n)).collect()
    })
}

fn count_correct<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|(row, &label)| argmax(&logits.values()[row * classes..(row + 1) * classes]) == label)
        .count()
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Compute the full-batch cross-entropy gradient without updating the model.
/// Used by attacks that need a one-shot benign gradient.
pub fn full_batch_gradient<S: Scalar>(
    state: &ModelState<S>,
    ds: &Dataset<S>,
) -> Result<Gradients<S>> {
    if ds.len() < 2 {
        return Err(Error::EmptyDataset(
            "full-batch gradient needs at least 2 samples".into(),
        ));
    }
    let indices: Vec<usize> = (0..ds.len()).collect();
    let (x, labels) = ds.batch(&indices)?;
    let mut probe = state.clone();
    let (_, cache) = forward_train(&mut probe, &x)?;
    backward(state, &cache, &labels)
}
