//! Brute-force vote tallies for checking the stitcher.

use meshseg::sampler::{plan_inference, SamplerConfig};
use meshseg::stitch::VoteAccumulator;
use meshseg::volume::SubvolumeRef;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-voxel tally written out longhand.
pub fn brute_force(dims: [usize; 3], n: usize, votes: &[(SubvolumeRef, Vec<u8>)]) -> Vec<Vec<u32>> {
    let [d, h, w] = dims;
    let mut out = vec![vec![0u32; n]; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                for (r, labels) in votes {
                    if r.contains(z, y, x) {
                        let [oz, oy, ox] = r.origin;
                        let s = r.side;
                        let l = labels[((z - oz) * s + (y - oy)) * s + (x - ox)];
                        out[(z * h + y) * w + x][l as usize] += 1;
                    }
                }
            }
        }
    }
    out
}

pub fn smallest_argmax(counts: &[u32]) -> u8 {
    let max = *counts.iter().max().unwrap();
    counts.iter().position(|&c| c == max).unwrap() as u8
}

pub fn random_votes(dims: [usize; 3], n: usize, refs: usize, rng: &mut ChaCha8Rng) -> Vec<(SubvolumeRef, Vec<u8>)> {
    let side_max = *dims.iter().min().unwrap();
    (0..refs)
        .map(|_| {
            let side = rng.random_range(1..=side_max);
            let origin = std::array::from_fn(|a| rng.random_range(0..=dims[a] - side));
            let labels = (0..side.pow(3)).map(|_| rng.random_range(0..n as u8)).collect();
            (SubvolumeRef::new(origin, side), labels)
        })
        .collect()
}

pub fn tally(dims: [usize; 3], n: usize, votes: &[(SubvolumeRef, Vec<u8>)]) -> VoteAccumulator {
    let mut acc = VoteAccumulator::new(dims, n).unwrap();
    for (r, l) in votes {
        acc.accumulate(r, l).unwrap();
    }
    acc
}

/// Outcome of [`exhaustive_sweep`].
#[derive(Debug, Default)]
pub struct SweepReport {
    pub cases: usize,
    pub recount_mismatches: usize,
    pub order_mismatches: usize,
    pub uncovered_plans: usize,
}

/// Every small dims/side combination, several sampled counts each: compares
/// the accumulator with [`brute_force`], reshuffles the processing order, and
/// checks that each plan covers the volume.
pub fn exhaustive_sweep(seed: u64) -> SweepReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SweepReport::default();
    for d in 1..=7 {
        for h in [1, 3, 5, 7] {
            for w in [2, 5, 6] {
                for side in 1..=d.min(h).min(w) {
                    for sampled in [0, 1, 5] {
                        let dims = [d, h, w];
                        let plan = plan_inference(dims, &SamplerConfig::new(side, 1.5, seed), sampled, rng.random())
                            .expect("side fits");
                        if plan.coverage_counts().contains(&0) {
                            report.uncovered_plans += 1;
                        }
                        let n = rng.random_range(1..=4usize);
                        let mut votes: Vec<(SubvolumeRef, Vec<u8>)> = plan
                            .refs()
                            .map(|r| (*r, (0..side.pow(3)).map(|_| rng.random_range(0..n as u8)).collect()))
                            .collect();
                        let acc = tally(dims, n, &votes);
                        let expected = brute_force(dims, n, &votes);
                        let matches = (0..d * h * w).all(|v| {
                            let (z, y, x) = (v / (h * w), v / w % h, v % w);
                            acc.votes(z, y, x).iter().map(|&c| c as u32).eq(expected[v].iter().copied())
                        });
                        let finals: Vec<u8> = expected.iter().map(|c| smallest_argmax(c)).collect();
                        let matches = matches && acc.finalize().map(|l| l.labels() == finals.as_slice()).unwrap_or(false);
                        if !matches {
                            report.recount_mismatches += 1;
                        }
                        votes.shuffle(&mut rng);
                        let shuffled = tally(dims, n, &votes);
                        if shuffled != acc || shuffled.finalize().ok() != acc.finalize().ok() {
                            report.order_mismatches += 1;
                        }
                        report.cases += 1;
                    }
                }
            }
        }
    }
    report
}
