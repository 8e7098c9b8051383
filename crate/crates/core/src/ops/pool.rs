//! 2x2x2 max pooling (stride 2) and nearest-neighbour 2x upsampling.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Flat input indices of the selected maxima, one per output element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: [usize; 5],
    pub argmax: Vec<usize>,
}

pub fn maxpool3d_forward<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, PoolIndices)> {
    let dims = x.dims();
    if dims.iter().any(|d| d % 2 != 0) {
        return Err(Error::NonDivisibleDims { dims, factor: 2 });
    }
    let [_, h, w] = dims;
    let [od, oh, ow] = dims.map(|v| v / 2);
    let mut out = Tensor::zeros([x.batch(), x.channels(), od, oh, ow]);
    let mut argmax = Vec::with_capacity(out.data().len());
    let spatial = x.spatial();
    let planes = x.batch() * x.channels();
    let mut k = 0;
    for plane in 0..planes {
        let base = plane * spatial;
        let src = &x.data()[base..base + spatial];
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_v = S::ZERO;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo + dx;
                                // First maximum in scan order wins ties.
                                if best == usize::MAX || src[i] > best_v {
                                    best = i;
                                    best_v = src[i];
                                }
                            }
                        }
                    }
                    out.data_mut()[k] = best_v;
                    argmax.push(base + best);
                    k += 1;
                }
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_shape: x.shape(),
            argmax,
        },
    ))
}

pub fn maxpool3d_backward<S: Scalar>(grad_out: &Tensor<S>, indices: &PoolIndices) -> Result<Tensor<S>> {
    if grad_out.data().len() != indices.argmax.len() {
        return Err(Error::shape("maxpool gradient does not match recorded indices"));
    }
    let mut g = Tensor::zeros(indices.input_shape);
    for (&i, &v) in indices.argmax.iter().zip(grad_out.data()) {
        g.data_mut()[i] = v;
    }
    Ok(g)
}

pub fn upsample3d_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let [d, h, w] = x.dims();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([x.batch(), x.channels(), 2 * d, oh, ow]);
    let out_spatial = out.spatial();
    let planes = x.batch() * x.channels();
    for plane in 0..planes {
        let src = &x.data()[plane * d * h * w..(plane + 1) * d * h * w];
        let dst = &mut out.data_mut()[plane * out_spatial..(plane + 1) * out_spatial];
        for z in 0..2 * d {
            for y in 0..oh {
                let row = &src[((z / 2) * h + y / 2) * w..((z / 2) * h + y / 2 + 1) * w];
                let start = (z * oh + y) * ow;
                for (x, v) in dst[start..start + ow].iter_mut().enumerate() {
                    *v = row[x / 2];
                }
            }
        }
    }
    out
}

/// Sums each 2x2x2 block of the gradient back onto its source voxel.
pub fn upsample3d_backward<S: Scalar>(grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    let dims = grad_out.dims();
    if dims.iter().any(|d| d % 2 != 0) {
        return Err(Error::NonDivisibleDims { dims, factor: 2 });
    }
    let [od, oh, ow] = dims;
    let [d, h, w] = dims.map(|v| v / 2);
    let mut g = Tensor::<S>::zeros([grad_out.batch(), grad_out.channels(), d, h, w]);
    let planes = grad_out.batch() * grad_out.channels();
    let in_spatial = od * oh * ow;
    let mut acc = vec![0.0f64; d * h * w];
    for plane in 0..planes {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let src = &grad_out.data()[plane * in_spatial..(plane + 1) * in_spatial];
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    acc[((z / 2) * h + y / 2) * w + x / 2] += src[(z * oh + y) * ow + x].widen();
                }
            }
        }
        let dst = &mut g.data_mut()[plane * d * h * w..(plane + 1) * d * h * w];
        for (v, a) in dst.iter_mut().zip(&acc) {
            *v = S::narrow(*a);
        }
    }
    Ok(g)
}
