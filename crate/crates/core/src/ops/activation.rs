//! Point-wise activations and the voxel-wise softmax over channels.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

impl Activation {
    pub fn forward<S: Scalar>(self, x: &Tensor<S>) -> Tensor<S> {
        match self {
            Activation::Relu => relu_forward(x),
            Activation::Tanh => tanh_forward(x),
            Activation::None => x.clone(),
        }
    }

    /// Backward expressed through the activation's own output.
    pub fn backward<S: Scalar>(self, grad_out: &Tensor<S>, output: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            Activation::Relu => relu_backward(grad_out, output),
            Activation::Tanh => tanh_backward(grad_out, output),
            Activation::None => Ok(grad_out.clone()),
        }
    }
}

pub fn relu_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::ZERO { v } else { S::ZERO })
}

/// `output` is the relu output; gradient passes where it is positive.
pub fn relu_backward<S: Scalar>(grad_out: &Tensor<S>, output: &Tensor<S>) -> Result<Tensor<S>> {
    grad_out.same_shape(output, "relu backward")?;
    let mut g = grad_out.clone();
    for (d, &y) in g.data_mut().iter_mut().zip(output.data()) {
        if y <= S::ZERO {
            *d = S::ZERO;
        }
    }
    Ok(g)
}

pub fn tanh_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| S::narrow(v.widen().tanh()))
}

/// `output` is the tanh output: d/dx tanh = 1 - y^2.
pub fn tanh_backward<S: Scalar>(grad_out: &Tensor<S>, output: &Tensor<S>) -> Result<Tensor<S>> {
    grad_out.same_shape(output, "tanh backward")?;
    let mut g = grad_out.clone();
    for (d, &y) in g.data_mut().iter_mut().zip(output.data()) {
        let y = y.widen();
        *d = S::narrow(d.widen() * (1.0 - y * y));
    }
    Ok(g)
}

/// Softmax across the channel axis independently at every voxel, stabilised
/// by subtracting the per-voxel maximum.
pub fn softmax_voxelwise<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let channels = x.channels();
    let spatial = x.spatial();
    let mut out = Tensor::zeros(x.shape());
    let mut logits = vec![0.0f64; channels];
    for n in 0..x.batch() {
        let src = x.sample(n);
        let base = n * channels * spatial;
        for v in 0..spatial {
            let mut max = f64::NEG_INFINITY;
            for (c, l) in logits.iter_mut().enumerate() {
                *l = src[c * spatial + v].widen();
                max = max.max(*l);
            }
            let mut sum = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                sum += *l;
            }
            let dst = out.data_mut();
            for (c, l) in logits.iter().enumerate() {
                dst[base + c * spatial + v] = S::narrow(l / sum);
            }
        }
    }
    out
}

/// Per-voxel log-sum-exp over channels, used for a stable cross entropy.
pub fn log_sum_exp_voxelwise<S: Scalar>(x: &Tensor<S>) -> Vec<f64> {
    let channels = x.channels();
    let spatial = x.spatial();
    let mut out = Vec::with_capacity(x.batch() * spatial);
    for n in 0..x.batch() {
        let src = x.sample(n);
        for v in 0..spatial {
            let max = (0..channels)
                .map(|c| src[c * spatial + v].widen())
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..channels)
                .map(|c| (src[c * spatial + v].widen() - max).exp())
                .sum();
            out.push(max + sum.ln());
        }
    }
    out
}

/// Jacobian-vector product of the voxel-wise softmax: `y * (g - <g, y>)`.
pub fn softmax_backward<S: Scalar>(grad_out: &Tensor<S>, output: &Tensor<S>) -> Result<Tensor<S>> {
    grad_out.same_shape(output, "softmax backward")?;
    let channels = output.channels();
    let spatial = output.spatial();
    let mut g = Tensor::zeros(output.shape());
    for n in 0..output.batch() {
        let y = output.sample(n);
        let go = grad_out.sample(n);
        let base = n * channels * spatial;
        for v in 0..spatial {
            let dot: f64 = (0..channels)
                .map(|c| go[c * spatial + v].widen() * y[c * spatial + v].widen())
                .sum();
            for c in 0..channels {
                let i = c * spatial + v;
                g.data_mut()[base + i] = S::narrow(y[i].widen() * (go[i].widen() - dot));
            }
        }
    }
    Ok(g)
}
