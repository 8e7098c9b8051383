//! Subvolume placement: Gaussian-centred sampling for training, and grid plus
//! sampled cover plans for inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims, SubvolumeRef};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Centre of the distribution in voxels (z, y, x); `None` means the volume centre.
    #[serde(default)]
    pub mean: Option<[f64; 3]>,
    /// Per-axis standard deviation in voxels.
    pub sigma: [f64; 3],
    /// Subvolume side length.
    pub side: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(side: usize, sigma: f64, seed: u64) -> Self {
        Self {
            mean: None,
            sigma: [sigma; 3],
            side,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 {
            return Err(Error::field("sampler.side", "must be >= 1"));
        }
        if self.sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::field("sampler.sigma", "must be finite and > 0"));
        }
        if let Some(m) = self.mean {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::field("sampler.mean", "must be finite"));
            }
        }
        Ok(())
    }

    pub fn check_fits(&self, dims: Dims) -> Result<()> {
        check_side(self.side, dims)
    }

    pub fn mean_for(&self, dims: Dims) -> [f64; 3] {
        self.mean.unwrap_or(dims.map(|d| d as f64 / 2.0))
    }
}

pub fn check_side(side: usize, dims: Dims) -> Result<()> {
    if side == 0 || dims.iter().any(|&d| side > d) {
        return Err(Error::SubvolumeTooLarge { side, dims });
    }
    Ok(())
}

/// Seed of worker `index` in a family of streams rooted at `seed`.
pub fn worker_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

/// An endless reproducible stream of in-bounds subvolumes whose centres are
/// Gaussian draws rounded to the nearest voxel (half away from zero), then
/// clamped so the cube fits.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    dims: Dims,
    side: usize,
    axes: [Normal<f64>; 3],
    rng: ChaCha8Rng,
}

impl GaussianSampler {
    pub fn new(cfg: &SamplerConfig, dims: Dims) -> Result<Self> {
        Self::with_seed(cfg, dims, cfg.seed)
    }

    pub fn with_seed(cfg: &SamplerConfig, dims: Dims, seed: u64) -> Result<Self> {
        cfg.validate()?;
        cfg.check_fits(dims)?;
        let mean = cfg.mean_for(dims);
        let axis = |a: usize| {
            Normal::new(mean[a], cfg.sigma[a])
                .map_err(|e| Error::field("sampler.sigma", e.to_string()))
        };
        Ok(Self {
            dims,
            side: cfg.side,
            axes: [axis(0)?, axis(1)?, axis(2)?],
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Origin for a given centre, clamped into bounds.
    pub fn place(&self, center: [f64; 3]) -> SubvolumeRef {
        let half = (self.side / 2) as i64;
        let origin = std::array::from_fn(|a| {
            let hi = (self.dims[a] - self.side) as i64;
            (center[a].round() as i64 - half).clamp(0, hi) as usize
        });
        SubvolumeRef::new(origin, self.side)
    }

    /// Draws one centre (z, y, x), unrounded and unclamped.
    pub fn draw_center(&mut self) -> [f64; 3] {
        let z = self.axes[0].sample(&mut self.rng);
        let y = self.axes[1].sample(&mut self.rng);
        let x = self.axes[2].sample(&mut self.rng);
        [z, y, x]
    }

    pub fn next_ref(&mut self) -> SubvolumeRef {
        let c = self.draw_center();
        self.place(c)
    }

    pub fn take(&mut self, count: usize) -> Vec<SubvolumeRef> {
        (0..count).map(|_| self.next_ref()).collect()
    }
}

pub fn sample_training_centers(cfg: &SamplerConfig, dims: Dims, count: usize) -> Result<Vec<SubvolumeRef>> {
    Ok(GaussianSampler::new(cfg, dims)?.take(count))
}

/// Tile origins along one axis: stride `side` from 0, the last tile shifted
/// back to end at the boundary.
pub fn grid_origins(dim: usize, side: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    while o + side < dim {
        out.push(o);
        o += side;
    }
    out.push(dim - side);
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoveragePlan {
    pub dims: Dims,
    pub side: usize,
    pub grid: Vec<SubvolumeRef>,
    pub sampled: Vec<SubvolumeRef>,
}

impl CoveragePlan {
    /// Grid refs followed by sampled refs.
    pub fn refs(&self) -> impl Iterator<Item = &SubvolumeRef> {
        self.grid.iter().chain(&self.sampled)
    }

    pub fn len(&self) -> usize {
        self.grid.len() + self.sampled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// How many refs cover each voxel, in canonical voxel order.
    pub fn coverage_counts(&self) -> Vec<u32> {
        let [_, h, w] = self.dims;
        let mut counts = vec![0u32; voxel_count(self.dims)];
        for r in self.refs() {
            let [oz, oy, ox] = r.origin;
            for z in oz..oz + r.side {
                for y in oy..oy + r.side {
                    let row = (z * h + y) * w;
                    for c in &mut counts[row + ox..row + ox + r.side] {
                        *c += 1;
                    }
                }
            }
        }
        counts
    }
}

/// The grid cover of `dims` plus `sampled` extra refs drawn with `cfg`'s
/// Gaussian from `seed`.
pub fn plan_inference(dims: Dims, cfg: &SamplerConfig, sampled: usize, seed: u64) -> Result<CoveragePlan> {
    cfg.validate()?;
    cfg.check_fits(dims)?;
    let side = cfg.side;
    let (zs, ys, xs) = (
        grid_origins(dims[0], side),
        grid_origins(dims[1], side),
        grid_origins(dims[2], side),
    );
    let mut grid = Vec::with_capacity(zs.len() * ys.len() * xs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                grid.push(SubvolumeRef::new([z, y, x], side));
            }
        }
    }
    let sampled = GaussianSampler::with_seed(cfg, dims, seed)?.take(sampled);
    Ok(CoveragePlan {
        dims,
        side,
        grid,
        sampled,
    })
}
