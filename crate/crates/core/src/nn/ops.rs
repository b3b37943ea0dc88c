//! Forward/backward passes and the SGD update.
//!
//! Train-mode forward normalizes BN layers with batch statistics and folds
//! them into the running statistics; eval-mode forward uses the running
//! statistics and never mutates the state. Backward propagates exact
//! batch-statistic gradients through train-mode BN.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

use super::loss::cross_entropy_grad;
use super::{LayerSpec, ModelState, BN_EPS};

/// Per-layer data saved by a train-mode forward pass.
#[derive(Debug, Clone)]
enum LayerCache<S: Scalar> {
    Dense { input: Tensor<S> },
    Conv { input: Tensor<S> },
    Relu { input: Tensor<S> },
    Bn { xhat: Tensor<S>, inv_std: Vec<S> },
    Flatten { input_shape: Vec<usize> },
}

/// Opaque record linking a train-mode forward pass to its backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S: Scalar> {
    layers: Vec<LayerCache<S>>,
    logits: Tensor<S>,
    batch: usize,
    layer_count: usize,
}

impl<S: Scalar> ForwardCache<S> {
    pub fn logits(&self) -> &Tensor<S> {
        &self.logits
    }

    /// Input that reached the given dense layer (the penultimate features
    /// when asked for the final dense layer).
    pub fn dense_input(&self, layer: usize) -> Option<&Tensor<S>> {
        match self.layers.get(layer) {
            Some(LayerCache::Dense { input }) => Some(input),
            _ => None,
        }
    }
}

/// Gradients of every learnable tensor, mirroring `ModelState::params`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Gradients<S: Scalar> {
    pub per_layer: Vec<Vec<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(state: &ModelState<S>) -> Self {
        let per_layer = state
            .params
            .iter()
            .map(|ts| ts.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect())
            .collect();
        Gradients { per_layer }
    }

    pub fn any_non_finite(&self) -> bool {
        self.per_layer
            .iter()
            .flatten()
            .any(|t| t.values().iter().any(|v| !v.is_finite()))
    }

    /// Add `scale * flat` where `flat` lists coordinates in flatten order
    /// (layer-major, tensor-major, row-major).
    pub fn add_flat_scaled(&mut self, flat: &[S], scale: S) {
        let mut offset = 0;
        for tensors in &mut self.per_layer {
            for t in tensors {
                let n = t.len();
                for (v, f) in t.values_mut().iter_mut().zip(&flat[offset..offset + n]) {
                    *v += scale * *f;
                }
                offset += n;
            }
        }
        debug_assert_eq!(offset, flat.len());
    }
}

fn check_input<S: Scalar>(state: &ModelState<S>, x: &Tensor<S>) -> Result<usize> {
    let shape = x.shape();
    if shape.len() != state.arch.input_shape.len() + 1
        || shape[1..] != state.arch.input_shape[..]
    {
        return Err(Error::ShapeMismatch {
            expected: format!("[n, {:?}]", state.arch.input_shape),
            got: format!("{shape:?}"),
        });
    }
    Ok(shape[0])
}

/// Train-mode forward: batch statistics for BN, running stats updated in
/// place, cache returned for [`backward`].
pub fn forward_train<S: Scalar>(
    state: &mut ModelState<S>,
    x: &Tensor<S>,
) -> Result<(Tensor<S>, ForwardCache<S>)> {
    let batch = check_input(state, x)?;
    if batch < 2 {
        return Err(Error::BatchTooSmall(batch));
    }
    let mut act = x.clone();
    let mut caches = Vec::with_capacity(state.arch.layers.len());
    let mut bn_index = 0usize;
    let layers = state.arch.layers.clone();
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            LayerSpec::Dense { .. } => {
                let input = act.clone();
                act = dense_forward(&state.params[i][0], &state.params[i][1], &act);
                caches.push(LayerCache::Dense { input });
            }
            LayerSpec::Conv2d { kernel, stride, .. } => {
                let input = act.clone();
                act = conv_forward(&state.params[i][0], &state.params[i][1], &act, *kernel, *stride);
                caches.push(LayerCache::Conv { input });
            }
            LayerSpec::Relu => {
                let input = act.clone();
                for v in act.values_mut() {
                    if *v < S::zero() {
                        *v = S::zero();
                    }
                }
                caches.push(LayerCache::Relu { input });
            }
            LayerSpec::Flatten => {
                let input_shape = act.shape().to_vec();
                let n = input_shape[0];
                let rest: usize = input_shape[1..].iter().product();
                act = act.reshaped(vec![n, rest])?;
                caches.push(LayerCache::Flatten { input_shape });
            }
            LayerSpec::BatchNorm { features } => {
                let momentum = c::<S>(state.bn_stats.momentum);
                let gamma = state.params[i][0].clone();
                let beta = state.params[i][1].clone();
                let (out, xhat, inv_std, mean, var) = bn_forward_train(&act, &gamma, &beta, *features);
                let stats = &mut state.bn_stats.layers[bn_index];
                for f in 0..*features {
                    stats.running_mean[f] =
                        (S::one() - momentum) * stats.running_mean[f] + momentum * mean[f];
                    stats.running_var[f] =
                        (S::one() - momentum) * stats.running_var[f] + momentum * var[f];
                }
                act = out;
                caches.push(LayerCache::Bn { xhat, inv_std });
                bn_index += 1;
            }
        }
    }
    let cache = ForwardCache {
        layers: caches,
        logits: act.clone(),
        batch,
        layer_count: layers.len(),
    };
    Ok((act, cache))
}

/// Eval-mode forward: BN uses running statistics; the state is never mutated.
pub fn forward_eval<S: Scalar>(state: &ModelState<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    check_input(state, x)?;
    let mut act = x.clone();
    let mut bn_index = 0usize;
    for (i, layer) in state.arch.layers.iter().enumerate() {
        match layer {
            LayerSpec::Dense { .. } => {
                act = dense_forward(&state.params[i][0], &state.params[i][1], &act);
            }
            LayerSpec::Conv2d { kernel, stride, .. } => {
                act = conv_forward(&state.params[i][0], &state.params[i][1], &act, *kernel, *stride);
            }
            LayerSpec::Relu => {
                for v in act.values_mut() {
                    if *v < S::zero() {
                        *v = S::zero();
                    }
                }
            }
            LayerSpec::Flatten => {
                let n = act.shape()[0];
                let rest: usize = act.shape()[1..].iter().product();
                act = act.reshaped(vec![n, rest])?;
            }
            LayerSpec::BatchNorm { features } => {
                let stats = &state.bn_stats.layers[bn_index];
                act = bn_forward_eval(
                    &act,
                    &state.params[i][0],
                    &state.params[i][1],
                    &stats.running_mean,
                    &stats.running_var,
                    *features,
                );
                bn_index += 1;
            }
        }
    }
    Ok(act)
}

/// Gradient of mean softmax cross-entropy w.r.t. every learnable parameter.
pub fn backward<S: Scalar>(
    state: &ModelState<S>,
    cache: &ForwardCache<S>,
    labels: &[usize],
) -> Result<Gradients<S>> {
    check_cache(state, cache)?;
    if labels.len() != cache.batch {
        return Err(Error::CacheMismatch(format!(
            "{} labels for a batch of {}",
            labels.len(),
            cache.batch
        )));
    }
    let upstream = cross_entropy_grad(&cache.logits, labels, state.arch.num_classes)?;
    backprop(state, cache, upstream, state.arch.layers.len())
}

/// Backward pass that starts from a gradient w.r.t. the input of the final
/// dense layer (the penultimate features). The final layer receives zero
/// gradients; everything below gets exact gradients.
pub fn backward_from_features<S: Scalar>(
    state: &ModelState<S>,
    cache: &ForwardCache<S>,
    feature_grad: Tensor<S>,
) -> Result<Gradients<S>> {
    check_cache(state, cache)?;
    let last = state
        .arch
        .final_dense_layer()
        .ok_or_else(|| Error::CacheMismatch("arch has no final dense layer".into()))?;
    backprop(state, cache, feature_grad, last)
}

fn check_cache<S: Scalar>(state: &ModelState<S>, cache: &ForwardCache<S>) -> Result<()> {
    if cache.layer_count != state.arch.layers.len() {
        return Err(Error::CacheMismatch(format!(
            "cache covers {} layers, state has {}",
            cache.layer_count,
            state.arch.layers.len()
        )));
    }
    Ok(())
}

/// Walk layers `[0, upto)` in reverse, propagating `upstream`.
fn backprop<S: Scalar>(
    state: &ModelState<S>,
    cache: &ForwardCache<S>,
    mut upstream: Tensor<S>,
    upto: usize,
) -> Result<Gradients<S>> {
    let mut grads = Gradients::zeros_like(state);
    for i in (0..upto).rev() {
        match (&state.arch.layers[i], &cache.layers[i]) {
            (LayerSpec::Dense { .. }, LayerCache::Dense { input }) => {
                let (dw, db, dx) = dense_backward(&state.params[i][0], input, &upstream);
                grads.per_layer[i] = vec![dw, db];
                upstream = dx;
            }
            (LayerSpec::Conv2d { kernel, stride, .. }, LayerCache::Conv { input }) => {
                let (dw, db, dx) =
                    conv_backward(&state.params[i][0], input, &upstream, *kernel, *stride);
                grads.per_layer[i] = vec![dw, db];
                upstream = dx;
            }
            (LayerSpec::Relu, LayerCache::Relu { input }) => {
                for (g, x) in upstream.values_mut().iter_mut().zip(input.values()) {
                    if *x <= S::zero() {
                        *g = S::zero();
                    }
                }
            }
            (LayerSpec::Flatten, LayerCache::Flatten { input_shape }) => {
                upstream = upstream.reshaped(input_shape.clone())?;
            }
            (LayerSpec::BatchNorm { features }, LayerCache::Bn { xhat, inv_std }) => {
                let (dgamma, dbeta, dx) =
                    bn_backward(&state.params[i][0], xhat, inv_std, &upstream, *features);
                grads.per_layer[i] = vec![dgamma, dbeta];
                upstream = dx;
            }
            _ => {
                return Err(Error::CacheMismatch(format!(
                    "layer {i} cache kind does not match the architecture"
                )))
            }
        }
    }
    Ok(grads)
}

/// `p <- p - lr * g` on every learnable tensor; BN running stats untouched.
pub fn sgd_step<S: Scalar>(state: &mut ModelState<S>, grads: &Gradients<S>, lr: S) -> Result<()> {
    sgd_step_filtered(state, grads, lr, |_| true)
}

/// SGD update restricted to layers for which `apply(layer_index)` is true.
pub fn sgd_step_filtered<S: Scalar>(
    state: &mut ModelState<S>,
    grads: &Gradients<S>,
    lr: S,
    apply: impl Fn(usize) -> bool,
) -> Result<()> {
    if lr <= S::zero() {
        return Err(Error::InvalidArgument {
            name: "lr",
            reason: "learning rate must be positive".into(),
        });
    }
    if grads.any_non_finite() {
        return Err(Error::NonFiniteGradient);
    }
    for (i, tensors) in state.params.iter_mut().enumerate() {
        if !apply(i) {
            continue;
        }
        for (p, g) in tensors.iter_mut().zip(&grads.per_layer[i]) {
            p.add_scaled(g, -lr);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- kernels

fn dense_forward<S: Scalar>(w: &Tensor<S>, b: &Tensor<S>, x: &Tensor<S>) -> Tensor<S> {
    let n = x.shape()[0];
    let in_f = x.shape()[1];
    let out_f = w.shape()[0];
    let xv = x.values();
    let wv = w.values();
    let bv = b.values();
    let mut out = vec![S::zero(); n * out_f];
    for s in 0..n {
        let xrow = &xv[s * in_f..(s + 1) * in_f];
        let orow = &mut out[s * out_f..(s + 1) * out_f];
        for o in 0..out_f {
            let wrow = &wv[o * in_f..(o + 1) * in_f];
            let mut acc = bv[o];
            for (xi, wi) in xrow.iter().zip(wrow) {
                acc += *xi * *wi;
            }
            orow[o] = acc;
        }
    }
    Tensor::from_parts(vec![n, out_f], out)
}

fn dense_backward<S: Scalar>(
    w: &Tensor<S>,
    input: &Tensor<S>,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let n = input.shape()[0];
    let in_f = input.shape()[1];
    let out_f = w.shape()[0];
    let xv = input.values();
    let wv = w.values();
    let dyv = dy.values();
    let mut dw = vec![S::zero(); out_f * in_f];
    let mut db = vec![S::zero(); out_f];
    let mut dx = vec![S::zero(); n * in_f];
    for s in 0..n {
        let xrow = &xv[s * in_f..(s + 1) * in_f];
        let dyrow = &dyv[s * out_f..(s + 1) * out_f];
        let dxrow = &mut dx[s * in_f..(s + 1) * in_f];
        for o in 0..out_f {
            let g = dyrow[o];
            db[o] += g;
            let dwrow = &mut dw[o * in_f..(o + 1) * in_f];
            let wrow = &wv[o * in_f..(o + 1) * in_f];
            for i in 0..in_f {
                dwrow[i] += g * xrow[i];
                dxrow[i] += g * wrow[i];
            }
        }
    }
    (
        Tensor::from_parts(vec![out_f, in_f], dw),
        Tensor::from_parts(vec![out_f], db),
        Tensor::from_parts(vec![n, in_f], dx),
    )
}

fn conv_forward<S: Scalar>(
    w: &Tensor<S>,
    b: &Tensor<S>,
    x: &Tensor<S>,
    k: usize,
    stride: usize,
) -> Tensor<S> {
    let (n, in_ch, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let out_ch = w.shape()[0];
    let oh = (h - k) / stride + 1;
    let ow = (wd - k) / stride + 1;
    let xv = x.values();
    let wv = w.values();
    let bv = b.values();
    let mut out = vec![S::zero(); n * out_ch * oh * ow];
    for s in 0..n {
        for oc in 0..out_ch {
            for y0 in 0..oh {
                for x0 in 0..ow {
                    let mut acc = bv[oc];
                    for ic in 0..in_ch {
                        for ky in 0..k {
                            let iy = y0 * stride + ky;
                            let xbase = ((s * in_ch + ic) * h + iy) * wd + x0 * stride;
                            let wbase = ((oc * in_ch + ic) * k + ky) * k;
                            for kx in 0..k {
                                acc += xv[xbase + kx] * wv[wbase + kx];
                            }
                        }
                    }
                    out[((s * out_ch + oc) * oh + y0) * ow + x0] = acc;
                }
            }
        }
    }
    Tensor::from_parts(vec![n, out_ch, oh, ow], out)
}

fn conv_backward<S: Scalar>(
    w: &Tensor<S>,
    input: &Tensor<S>,
    dy: &Tensor<S>,
    k: usize,
    stride: usize,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (n, in_ch, h, wd) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let out_ch = w.shape()[0];
    let oh = dy.shape()[2];
    let ow = dy.shape()[3];
    let xv = input.values();
    let wv = w.values();
    let dyv = dy.values();
    let mut dw = vec![S::zero(); w.len()];
    let mut db = vec![S::zero(); out_ch];
    let mut dx = vec![S::zero(); input.len()];
    for s in 0..n {
        for oc in 0..out_ch {
            for y0 in 0..oh {
                for x0 in 0..ow {
                    let g = dyv[((s * out_ch + oc) * oh + y0) * ow + x0];
                    db[oc] += g;
                    for ic in 0..in_ch {
                        for ky in 0..k {
                            let iy = y0 * stride + ky;
                            let xbase = ((s * in_ch + ic) * h + iy) * wd + x0 * stride;
                            let wbase = ((oc * in_ch + ic) * k + ky) * k;
                            for kx in 0..k {
                                dw[wbase + kx] += g * xv[xbase + kx];
                                dx[xbase + kx] += g * wv[wbase + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![out_ch], db),
        Tensor::from_parts(input.shape().to_vec(), dx),
    )
}

/// Iterate a `[n, f, spatial...]` tensor per feature: for feature `f`, the
/// element indices are `(n * features + f) * spatial + r`.
fn bn_dims<S: Scalar>(x: &Tensor<S>, features: usize) -> (usize, usize) {
    let n = x.shape()[0];
    debug_assert_eq!(x.shape()[1], features);
    let spatial: usize = x.shape()[2..].iter().product();
    (n, spatial)
}

fn bn_forward_train<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    features: usize,
) -> (Tensor<S>, Tensor<S>, Vec<S>, Vec<S>, Vec<S>) {
    let (n, spatial) = bn_dims(x, features);
    let m = c::<S>((n * spatial) as f64);
    let eps = c::<S>(BN_EPS);
    let xv = x.values();
    let gv = gamma.values();
    let bv = beta.values();
    let mut mean = vec![S::zero(); features];
    let mut var = vec![S::zero(); features];
    for f in 0..features {
        let mut sum = S::zero();
        for s in 0..n {
            let base = (s * features + f) * spatial;
            for r in 0..spatial {
                sum += xv[base + r];
            }
        }
        let mu = sum / m;
        let mut sq = S::zero();
        for s in 0..n {
            let base = (s * features + f) * spatial;
            for r in 0..spatial {
                let d = xv[base + r] - mu;
                sq += d * d;
            }
        }
        mean[f] = mu;
        var[f] = sq / m;
    }
    let mut xhat = vec![S::zero(); xv.len()];
    let mut out = vec![S::zero(); xv.len()];
    let mut inv_std = vec![S::zero(); features];
    for f in 0..features {
        let istd = S::one() / (var[f] + eps).sqrt();
        inv_std[f] = istd;
        for s in 0..n {
            let base = (s * features + f) * spatial;
            for r in 0..spatial {
                let xh = (xv[base + r] - mean[f]) * istd;
                xhat[base + r] = xh;
                out[base + r] = gv[f] * xh + bv[f];
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), out),
        Tensor::from_parts(x.shape().to_vec(), xhat),
        inv_std,
        mean,
        var,
    )
}

fn bn_forward_eval<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &[S],
    running_var: &[S],
    features: usize,
) -> Tensor<S> {
    let (n, spatial) = bn_dims(x, features);
    let eps = c::<S>(BN_EPS);
    let xv = x.values();
    let gv = gamma.values();
    let bv = beta.values();
    let mut out = vec![S::zero(); xv.len()];
    for f in 0..features {
        let istd = S::one() / (running_var[f] + eps).sqrt();
        for s in 0..n {
            let base = (s * features + f) * spatial;
            for r in 0..spatial {
                out[base + r] = gv[f] * (xv[base + r] - running_mean[f]) * istd + bv[f];
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn bn_backward<S: Scalar>(
    gamma: &Tensor<S>,
    xhat: &Tensor<S>,
    inv_std: &[S],
    dy: &Tensor<S>,
    features: usize,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (n, spatial) = bn_dims(xhat, features);
    let m = c::<S>((n * spatial) as f64);
    let gv = gamma.values();
    let xh = xhat.values();
    let dyv = dy.values();
    let mut dgamma = vec![S::zero(); features];
    let mut dbeta = vec![S::zero(); features];
    let mut dx = vec![S::zero(); xh.len()];
    for f in 0..features {
        let mut sum_dy = S::zero();
        let mut sum_dy_xhat = S::zero();
        for s in 0..n {
            let base = (s * features + f) * spatial;
            for r in 0..spatial {
                sum_dy += dyv[base + r];
                sum_dy_xhat += dyv[base + r] * xh[base + r];
            }
        }
        dgamma[f] = sum_dy_xhat;
        dbeta[f] = sum_dy;
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        let scale = gv[f] * inv_std[f];
        for s in 0..n {
            let base = (s * features + f) * spatial;
            for r in 0..spatial {
                dx[base + r] =
                    scale * (dyv[base + r] - mean_dy - xh[base + r] * mean_dy_xhat);
            }
        }
    }
    (
        Tensor::from_parts(vec![features], dgamma),
        Tensor::from_parts(vec![features], dbeta),
        Tensor::from_parts(xhat.shape().to_vec(), dx),
    )
}
