//! Voxel-averaged categorical cross-entropy.

use crate::error::{Error, Result};
use crate::ops::activation::log_sum_exp_voxelwise;
use crate::tensor::{Scalar, Tensor};

fn check_targets<S: Scalar>(t: &Tensor<S>, targets: &[u8]) -> Result<()> {
    if targets.len() != t.batch() * t.spatial() {
        return Err(Error::shape(format!(
            "{} targets for {} voxels",
            targets.len(),
            t.batch() * t.spatial()
        )));
    }
    let classes = t.channels();
    if let Some(&label) = targets.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::ClassOutOfRange {
            label: label as usize,
            num_classes: classes,
        });
    }
    Ok(())
}

/// `-(1/V) * sum log p(target)` for probabilities `probs`, V = batch voxels.
/// `targets` is laid out sample-major then spatially, like one label volume
/// per sample.
pub fn cross_entropy<S: Scalar>(probs: &Tensor<S>, targets: &[u8]) -> Result<f64> {
    check_targets(probs, targets)?;
    let spatial = probs.spatial();
    let mut sum = 0.0;
    for (v, &t) in targets.iter().enumerate() {
        let (n, s) = (v / spatial, v % spatial);
        sum -= probs.plane(n, t as usize)[s].widen().ln();
    }
    Ok(sum / targets.len() as f64)
}

/// Softmax and cross-entropy fused on logits. Returns the loss and its
/// gradient with respect to the logits, `(softmax - onehot) / V`.
pub fn softmax_cross_entropy<S: Scalar>(logits: &Tensor<S>, targets: &[u8]) -> Result<(f64, Tensor<S>)> {
    check_targets(logits, targets)?;
    let lse = log_sum_exp_voxelwise(logits);
    let spatial = logits.spatial();
    let count = targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for n in 0..logits.batch() {
        for c in 0..logits.channels() {
            let src = logits.plane(n, c);
            let dst = grad.plane_mut(n, c);
            for s in 0..spatial {
                let v = n * spatial + s;
                let p = (src[s].widen() - lse[v]).exp();
                let hot = if targets[v] as usize == c { 1.0 } else { 0.0 };
                dst[s] = S::narrow((p - hot) / count);
            }
        }
        for s in 0..spatial {
            let v = n * spatial + s;
            loss += lse[v] - logits.plane(n, targets[v] as usize)[s].widen();
        }
    }
    Ok((loss / count, grad))
}
