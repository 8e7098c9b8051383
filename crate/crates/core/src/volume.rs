//! Dense volumes, label volumes and cubic subvolume references.
//!
//! Storage is channel-major: `(channel, depth, row, column)`, with the column
//! index varying fastest.

use crate::error::{Error, Result};

/// Spatial extent `(D, H, W)` in voxels.
pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// A multi-channel volume of finite `f32` intensities or class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    channels: usize,
    dims: Dims,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(channels: usize, dims: Dims, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || dims.contains(&0) {
            return Err(Error::shape(format!(
                "volume needs at least one channel and voxel, got {channels} x {dims:?}"
            )));
        }
        let expected = channels * voxel_count(dims);
        if data.len() != expected {
            return Err(Error::shape(format!(
                "volume {channels} x {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteValue { index, value });
        }
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    pub fn zeros(channels: usize, dims: Dims) -> Self {
        assert!(channels > 0 && !dims.contains(&0), "empty volume");
        Self {
            channels,
            dims,
            data: vec![0.0; channels * voxel_count(dims)],
        }
    }

    /// Builds a volume by evaluating `f(channel, z, y, x)` in storage order.
    pub fn from_fn(
        channels: usize,
        dims: Dims,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * voxel_count(dims));
        for c in 0..channels {
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for x in 0..dims[2] {
                        data.push(f(c, z, y, x));
                    }
                }
            }
        }
        Self::new(channels, dims, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.dims[0] + z) * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, z, y, x)]
    }

    /// Copies the cube described by `r` out of this volume.
    pub fn extract(&self, r: &SubvolumeRef) -> Result<Volume> {
        r.check(self.dims)?;
        let side = r.side;
        let [oz, oy, ox] = r.origin;
        let mut data = Vec::with_capacity(self.channels * side * side * side);
        for c in 0..self.channels {
            for z in oz..oz + side {
                for y in oy..oy + side {
                    let start = self.index(c, z, y, ox);
                    data.extend_from_slice(&self.data[start..start + side]);
                }
            }
        }
        Ok(Volume {
            channels: self.channels,
            dims: [side; 3],
            data,
        })
    }
}

pub fn extract_subvolume(vol: &Volume, r: &SubvolumeRef) -> Result<Volume> {
    vol.extract(r)
}

/// One class index per voxel, bounded by `num_classes` (at most 256).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    num_classes: usize,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub const MAX_CLASSES: usize = 256;

    pub fn new(dims: Dims, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if num_classes == 0 || num_classes > Self::MAX_CLASSES {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be in 1..=256, got {num_classes}"
            )));
        }
        if dims.contains(&0) || labels.len() != voxel_count(dims) {
            return Err(Error::shape(format!(
                "label volume {dims:?} needs {} labels, got {}",
                voxel_count(dims),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::ClassOutOfRange {
                label: label as usize,
                num_classes,
            });
        }
        Ok(Self {
            dims,
            num_classes,
            labels,
        })
    }

    pub fn filled(dims: Dims, num_classes: usize, label: u8) -> Result<Self> {
        Self::new(dims, num_classes, vec![label; voxel_count(dims)])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[self.index(z, y, x)]
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn extract(&self, r: &SubvolumeRef) -> Result<LabelVolume> {
        r.check(self.dims)?;
        let side = r.side;
        let [oz, oy, ox] = r.origin;
        let mut labels = Vec::with_capacity(side * side * side);
        for z in oz..oz + side {
            for y in oy..oy + side {
                let start = self.index(z, y, ox);
                labels.extend_from_slice(&self.labels[start..start + side]);
            }
        }
        Ok(LabelVolume {
            dims: [side; 3],
            num_classes: self.num_classes,
            labels,
        })
    }
}

/// A cube of side `side` whose lowest corner sits at `origin` (z, y, x).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SubvolumeRef {
    pub origin: [usize; 3],
    pub side: usize,
}

impl SubvolumeRef {
    pub fn new(origin: [usize; 3], side: usize) -> Self {
        Self { origin, side }
    }

    pub fn fits(&self, dims: Dims) -> bool {
        self.side >= 1 && (0..3).all(|a| self.origin[a] + self.side <= dims[a])
    }

    pub fn check(&self, dims: Dims) -> Result<()> {
        if self.fits(dims) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                origin: self.origin,
                side: self.side,
                dims,
            })
        }
    }

    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        [z, y, x]
            .iter()
            .zip(self.origin)
            .all(|(&p, o)| p >= o && p < o + self.side)
    }
}
