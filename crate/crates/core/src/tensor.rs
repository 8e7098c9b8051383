//! Batched 5D tensors `(batch, channel, depth, row, column)` used by the
//! network operators.

use std::fmt::Debug;

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims, Volume};

/// Storage scalar. Networks run in `f32`; gradient checks instantiate `f64`.
pub trait Scalar:
    Copy + Default + PartialOrd + PartialEq + Debug + Send + Sync + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn widen(self) -> f64;
    fn narrow(v: f64) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline(always)]
    fn widen(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn narrow(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline(always)]
    fn widen(self) -> f64 {
        self
    }
    #[inline(always)]
    fn narrow(v: f64) -> Self {
        v
    }
}

/// Shape `[n, c, d, h, w]`.
pub type Shape = [usize; 5];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![S::ZERO; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "tensor {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn dims(&self) -> Dims {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Voxels per channel plane.
    pub fn spatial(&self) -> usize {
        voxel_count(self.dims())
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The `(n, c)` channel volume as a flat slice.
    pub fn plane(&self, n: usize, c: usize) -> &[S] {
        let len = self.spatial();
        let start = (n * self.shape[1] + c) * len;
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [S] {
        let len = self.spatial();
        let start = (n * self.shape[1] + c) * len;
        &mut self.data[start..start + len]
    }

    /// All channels of sample `n`.
    pub fn sample(&self, n: usize) -> &[S] {
        let len = self.shape[1] * self.spatial();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::narrow(v.widen())).collect(),
        }
    }

    pub fn same_shape(&self, other: &Tensor<S>, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

impl Tensor<f32> {
    /// Stacks equally shaped volumes into a batch.
    pub fn from_volumes(volumes: &[Volume]) -> Result<Self> {
        let first = volumes
            .first()
            .ok_or_else(|| Error::shape("cannot batch zero volumes"))?;
        let (c, dims) = (first.channels(), first.dims());
        let mut data = Vec::with_capacity(volumes.len() * first.data().len());
        for v in volumes {
            if v.channels() != c || v.dims() != dims {
                return Err(Error::shape(format!(
                    "batch volumes differ: {c} x {dims:?} vs {} x {:?}",
                    v.channels(),
                    v.dims()
                )));
            }
            data.extend_from_slice(v.data());
        }
        Self::from_vec([volumes.len(), c, dims[0], dims[1], dims[2]], data)
    }

    pub fn from_volume(volume: &Volume) -> Self {
        let d = volume.dims();
        Self {
            shape: [1, volume.channels(), d[0], d[1], d[2]],
            data: volume.data().to_vec(),
        }
    }

    pub fn to_volume(&self, n: usize) -> Result<Volume> {
        Volume::new(self.channels(), self.dims(), self.sample(n).to_vec())
    }
}

/// Concatenates along the channel axis: `[a, b]`.
pub fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.batch() != b.batch() || a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "concat needs equal batch and spatial dims: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ca, cb) = (a.channels(), b.channels());
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for n in 0..a.batch() {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    let d = a.dims();
    Tensor::from_vec([a.batch(), ca + cb, d[0], d[1], d[2]], data)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels<S: Scalar>(t: &Tensor<S>, first: usize) -> Result<(Tensor<S>, Tensor<S>)> {
    if first > t.channels() {
        return Err(Error::shape(format!(
            "cannot split {} channels at {first}",
            t.channels()
        )));
    }
    let second = t.channels() - first;
    let s = t.spatial();
    let d = t.dims();
    let mut a = Vec::with_capacity(t.batch() * first * s);
    let mut b = Vec::with_capacity(t.batch() * second * s);
    for n in 0..t.batch() {
        let sample = t.sample(n);
        a.extend_from_slice(&sample[..first * s]);
        b.extend_from_slice(&sample[first * s..]);
    }
    Ok((
        Tensor::from_vec([t.batch(), first, d[0], d[1], d[2]], a)?,
        Tensor::from_vec([t.batch(), second, d[0], d[1], d[2]], b)?,
    ))
}
