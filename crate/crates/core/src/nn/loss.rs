//! Loss heads: softmax cross-entropy and supervised contrastive loss.

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch, computed with a stable
/// log-sum-exp.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<S> {
    let (n, classes) = logits_dims(logits, labels)?;
    let lv = logits.values();
    let mut total = S::zero();
    for (s, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, num_classes: classes });
        }
        let row = &lv[s * classes..(s + 1) * classes];
        let max = row.iter().cloned().fold(row[0], S::max);
        let sum: S = row.iter().map(|x| (*x - max).exp()).sum();
        total += max + sum.ln() - row[label];
    }
    Ok(total / c::<S>(n as f64))
}

/// Gradient of [`cross_entropy`] w.r.t. the logits: `(softmax - onehot) / n`.
pub fn cross_entropy_grad<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[usize],
    num_classes: usize,
) -> Result<Tensor<S>> {
    let (n, classes) = logits_dims(logits, labels)?;
    if classes != num_classes {
        return Err(Error::ShapeMismatch {
            expected: format!("{num_classes} logit columns"),
            got: format!("{classes}"),
        });
    }
    let lv = logits.values();
    let inv_n = c::<S>(1.0 / n as f64);
    let mut grad = vec![S::zero(); lv.len()];
    for (s, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, num_classes: classes });
        }
        let row = &lv[s * classes..(s + 1) * classes];
        let max = row.iter().cloned().fold(row[0], S::max);
        let exps: Vec<S> = row.iter().map(|x| (*x - max).exp()).collect();
        let denom: S = exps.iter().cloned().sum();
        let grow = &mut grad[s * classes..(s + 1) * classes];
        for k in 0..classes {
            let softmax = exps[k] / denom;
            let target = if k == label { S::one() } else { S::zero() };
            grow[k] = (softmax - target) * inv_n;
        }
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), grad))
}

fn logits_dims<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<(usize, usize)> {
    match logits.shape() {
        [n, classes] if *n == labels.len() => Ok((*n, *classes)),
        shape => Err(Error::ShapeMismatch {
            expected: format!("[{}, classes] logits", labels.len()),
            got: format!("{shape:?}"),
        }),
    }
}

/// Supervised contrastive loss (normalized embeddings, temperature `tau`)
/// and its gradient w.r.t. the raw features.
///
/// For anchor `i` with positives `P(i)` (same label, excluding `i`) the loss
/// is the mean over anchors with nonempty `P(i)` of
/// `-(1/|P(i)|) sum_p log(exp(z_i.z_p / tau) / sum_{a != i} exp(z_i.z_a / tau))`
/// where `z = f / |f|`. Anchors without positives are skipped; if none has a
/// positive the loss and gradient are zero.
pub fn supcon_loss_grad<S: Scalar>(
    features: &Tensor<S>,
    labels: &[usize],
    tau: S,
) -> Result<(S, Tensor<S>)> {
    let (n, dim) = match features.shape() {
        [n, d] if *n == labels.len() => (*n, *d),
        shape => {
            return Err(Error::ShapeMismatch {
                expected: format!("[{}, dim] features", labels.len()),
                got: format!("{shape:?}"),
            })
        }
    };
    let fv = features.values();
    let mut norms = vec![S::zero(); n];
    let mut z = vec![S::zero(); n * dim];
    for i in 0..n {
        let row = &fv[i * dim..(i + 1) * dim];
        let norm = row.iter().map(|x| *x * *x).sum::<S>().sqrt();
        norms[i] = norm;
        if norm > S::zero() {
            for d in 0..dim {
                z[i * dim + d] = row[d] / norm;
            }
        }
    }
    let dot = |a: usize, b: usize| -> S {
        let mut acc = S::zero();
        for d in 0..dim {
            acc += z[a * dim + d] * z[b * dim + d];
        }
        acc
    };

    let anchors: Vec<usize> = (0..n)
        .filter(|&i| labels.iter().enumerate().any(|(j, &l)| j != i && l == labels[i]))
        .collect();
    if anchors.is_empty() {
        return Ok((S::zero(), Tensor::zeros(features.shape().to_vec())));
    }
    let inv_anchors = c::<S>(1.0 / anchors.len() as f64);

    let mut loss = S::zero();
    // g[i][a] = dL_i / d(sim_ia), sims in units of z_i.z_a (tau folded in).
    let mut gmat = vec![S::zero(); n * n];
    for &i in &anchors {
        let others: Vec<usize> = (0..n).filter(|&a| a != i).collect();
        let positives: Vec<usize> = others
            .iter()
            .copied()
            .filter(|&a| labels[a] == labels[i])
            .collect();
        let sims: Vec<S> = others.iter().map(|&a| dot(i, a) / tau).collect();
        let max = sims.iter().cloned().fold(sims[0], S::max);
        let exps: Vec<S> = sims.iter().map(|s| (*s - max).exp()).collect();
        let denom: S = exps.iter().cloned().sum();
        let lse = max + denom.ln();
        let inv_p = c::<S>(1.0 / positives.len() as f64);
        for &p in &positives {
            let sim_ip = dot(i, p) / tau;
            loss += inv_p * (lse - sim_ip);
        }
        for (idx, &a) in others.iter().enumerate() {
            let softmax = exps[idx] / denom;
            let pos = if labels[a] == labels[i] { inv_p } else { S::zero() };
            gmat[i * n + a] = (softmax - pos) / tau;
        }
    }
    loss *= inv_anchors;

    // dL/dz_k collects two contributions per pair (k, a): anchor k scoring
    // candidate a (d sim_ka / dz_k = z_a) and anchor a scoring candidate k
    // (d sim_ak / dz_k = z_a). Both carry a z_a factor.
    let mut dz = vec![S::zero(); n * dim];
    for k in 0..n {
        for a in 0..n {
            let coeff = gmat[k * n + a] + gmat[a * n + k];
            if coeff != S::zero() {
                for d in 0..dim {
                    dz[k * dim + d] += coeff * z[a * dim + d];
                }
            }
        }
    }
    for v in &mut dz {
        *v *= inv_anchors;
    }

    // Chain through normalization: df = (dz - z (z . dz)) / |f|.
    let mut df = vec![S::zero(); n * dim];
    for k in 0..n {
        if norms[k] <= S::zero() {
            continue;
        }
        let mut zdot = S::zero();
        for d in 0..dim {
            zdot += z[k * dim + d] * dz[k * dim + d];
        }
        for d in 0..dim {
            df[k * dim + d] = (dz[k * dim + d] - z[k * dim + d] * zdot) / norms[k];
        }
    }
    Ok((loss, Tensor::from_parts(features.shape().to_vec(), df)))
}
