//! Whole-volume inference by majority vote over overlapping subvolumes.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops::activation::softmax_voxelwise;
use crate::sampler::{check_side, CoveragePlan};
use crate::tensor::Tensor;
use crate::train::normalize::Normalization;
use crate::volume::{voxel_count, Dims, LabelVolume, SubvolumeRef, Volume};

/// Per-voxel, per-class vote counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoteAccumulator {
    dims: Dims,
    num_classes: usize,
    /// Layout `[voxel][class]`.
    counts: Vec<u16>,
}

impl VoteAccumulator {
    pub fn new(dims: Dims, num_classes: usize) -> Result<Self> {
        if !(1..=LabelVolume::MAX_CLASSES).contains(&num_classes) {
            return Err(Error::InvalidConfig(format!(
                "vote accumulator needs 1..=256 classes, got {num_classes}"
            )));
        }
        Ok(Self {
            dims,
            num_classes,
            counts: vec![0; voxel_count(dims) * num_classes],
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn votes(&self, z: usize, y: usize, x: usize) -> &[u16] {
        let [_, h, w] = self.dims;
        let v = (z * h + y) * w + x;
        &self.counts[v * self.num_classes..(v + 1) * self.num_classes]
    }

    /// Votes cast at each voxel, in canonical order.
    pub fn totals(&self) -> Vec<u32> {
        self.counts
            .chunks_exact(self.num_classes)
            .map(|c| c.iter().map(|&v| v as u32).sum())
            .collect()
    }

    /// Adds one vote per voxel of `r` for the class in `labels` (side³, z-major).
    pub fn accumulate(&mut self, r: &SubvolumeRef, labels: &[u8]) -> Result<()> {
        r.check(self.dims)?;
        if labels.len() != r.side.pow(3) {
            return Err(Error::shape(format!(
                "{} labels for a subvolume of side {}",
                labels.len(),
                r.side
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(Error::ClassOutOfRange {
                label: label as usize,
                num_classes: self.num_classes,
            });
        }
        let [_, h, w] = self.dims;
        let [oz, oy, ox] = r.origin;
        let s = r.side;
        let n = self.num_classes;
        for z in 0..s {
            for y in 0..s {
                let row = ((oz + z) * h + oy + y) * w + ox;
                let src = &labels[(z * s + y) * s..(z * s + y + 1) * s];
                for (x, &l) in src.iter().enumerate() {
                    let c = &mut self.counts[(row + x) * n + l as usize];
                    *c = c.saturating_add(1);
                }
            }
        }
        Ok(())
    }

    /// Per-voxel argmax of the counts; ties go to the smallest class index.
    pub fn finalize(&self) -> Result<LabelVolume> {
        let n = self.num_classes;
        let mut empty = 0;
        let labels: Vec<u8> = self
            .counts
            .chunks_exact(n)
            .map(|c| {
                let mut best = 0;
                for k in 1..n {
                    if c[k] > c[best] {
                        best = k;
                    }
                }
                if c[best] == 0 {
                    empty += 1;
                }
                best as u8
            })
            .collect();
        if empty > 0 {
            return Err(Error::EmptyAccumulator(empty));
        }
        LabelVolume::new(self.dims, n, labels)
    }
}

/// Anything that labels batches of cubic subvolumes.
pub trait SubvolumePredictor: Sync {
    fn num_classes(&self) -> usize;

    /// One label array (side³) per input subvolume.
    fn predict(&self, batch: &[Volume]) -> Result<Vec<Vec<u8>>>;
}

/// First maximum over channels, per voxel of each sample.
pub fn argmax_channels(t: &Tensor<f32>) -> Vec<Vec<u8>> {
    let spatial = t.spatial();
    (0..t.batch())
        .map(|n| {
            (0..spatial)
                .map(|s| {
                    let mut best = 0;
                    let mut best_v = t.plane(n, 0)[s];
                    for c in 1..t.channels() {
                        let v = t.plane(n, c)[s];
                        if v > best_v {
                            best = c;
                            best_v = v;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

impl SubvolumePredictor for Model<f32> {
    fn num_classes(&self) -> usize {
        self.spec().num_classes
    }

    fn predict(&self, batch: &[Volume]) -> Result<Vec<Vec<u8>>> {
        let input = Tensor::from_volumes(batch)?;
        let probs = softmax_voxelwise(&self.forward_logits(&input)?);
        Ok(argmax_channels(&probs))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InferenceOptions {
    /// Subvolumes per forward pass.
    pub batch: usize,
    /// Thread cap; 0 uses the ambient pool.
    pub workers: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self { batch: 4, workers: 0 }
    }
}

/// Normalizes `vol`, labels every planned subvolume, and fuses the votes.
pub fn segment_volume<P: SubvolumePredictor + ?Sized>(
    predictor: &P,
    vol: &Volume,
    plan: &CoveragePlan,
    normalization: Normalization,
    options: InferenceOptions,
) -> Result<LabelVolume> {
    if plan.dims != vol.dims() {
        return Err(Error::PlanMismatch {
            plan: plan.dims,
            volume: vol.dims(),
        });
    }
    check_side(plan.side, vol.dims())?;
    let normalized = normalization.apply(vol)?;
    let refs: Vec<SubvolumeRef> = plan.refs().copied().collect();
    let batch = options.batch.max(1);
    let run = || -> Result<LabelVolume> {
        let mut acc = VoteAccumulator::new(vol.dims(), predictor.num_classes())?;
        let group = batch * rayon::current_num_threads().max(1);
        for refs in refs.chunks(group) {
            let labels: Vec<Vec<Vec<u8>>> = refs
                .par_chunks(batch)
                .map(|chunk| {
                    let inputs: Vec<Volume> = chunk
                        .iter()
                        .map(|r| normalized.extract(r))
                        .collect::<Result<_>>()?;
                    predictor.predict(&inputs)
                })
                .collect::<Result<_>>()?;
            for (r, l) in refs.iter().zip(labels.iter().flatten()) {
                acc.accumulate(r, l)?;
            }
        }
        acc.finalize()
    };
    if options.workers == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?
            .install(run)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_accumulator_is_an_error() {
        let acc = VoteAccumulator::new([2, 2, 2], 3).unwrap();
        assert!(matches!(acc.finalize(), Err(Error::EmptyAccumulator(8))));
    }

    #[test]
    fn single_vote_passes_through() {
        let mut acc = VoteAccumulator::new([2, 2, 2], 3).unwrap();
        let labels: Vec<u8> = (0..8).map(|v| (v % 3) as u8).collect();
        acc.accumulate(&SubvolumeRef::new([0; 3], 2), &labels).unwrap();
        assert_eq!(acc.finalize().unwrap().labels(), labels.as_slice());
    }

    #[test]
    fn ties_go_to_smallest_class() {
        let mut acc = VoteAccumulator::new([1, 1, 1], 3).unwrap();
        let r = SubvolumeRef::new([0; 3], 1);
        for l in [2, 0, 2, 0] {
            acc.accumulate(&r, &[l]).unwrap();
        }
        assert_eq!(acc.votes(0, 0, 0), &[2, 0, 2]);
        assert_eq!(acc.finalize().unwrap().labels(), &[0]);
        let mut acc = VoteAccumulator::new([2, 2, 2], 3).unwrap();
        acc.accumulate(&r, &[2]).unwrap();
        let full = SubvolumeRef::new([0; 3], 2);
        acc.accumulate(&full, &[1; 8]).unwrap();
        acc.accumulate(&full, &[2; 8]).unwrap();
        let out = acc.finalize().unwrap();
        assert_eq!(out.get(0, 0, 0), 2);
        assert!(out.labels()[1..].iter().all(|&l| l == 1));
    }

    #[test]
    fn accumulate_validates() {
        let mut acc = VoteAccumulator::new([2, 2, 2], 2).unwrap();
        assert!(matches!(
            acc.accumulate(&SubvolumeRef::new([1, 0, 0], 2), &[0; 8]),
            Err(Error::OutOfBounds { .. })
        ));
        assert!(matches!(
            acc.accumulate(&SubvolumeRef::new([0; 3], 1), &[2]),
            Err(Error::ClassOutOfRange { .. })
        ));
    }
}
