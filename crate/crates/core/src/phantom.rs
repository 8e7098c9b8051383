//! Synthetic head phantoms: nested randomized ellipsoids labelled background,
//! gray, and white, with Gaussian intensity noise and optional label noise on
//! tissue boundaries.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelVolume, Volume};
use crate::vvol;

pub const BACKGROUND: u8 = 0;
pub const GRAY: u8 = 1;
pub const WHITE: u8 = 2;
pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub count: usize,
    /// Maximum centre offset from the volume centre, in voxels per axis.
    pub center_jitter: f64,
    /// Outer (gray) surface semi-axes as a fraction of each dim, `[min, max]`.
    pub outer_axes: [f64; 2],
    /// Gray shell thickness in voxels, `[min, max]`.
    pub gray_thickness: [f64; 2],
    /// Relative amplitude of the folding of the inner (white) surface; 0 keeps it an ellipsoid.
    pub fold_amplitude: f64,
    /// Number of folds around the vertical axis.
    pub fold_frequency: u32,
    /// Mean intensity for background, gray, white.
    pub intensity_means: [f32; 3],
    pub intensity_sigma: f32,
    /// Fraction of boundary voxels relabelled to a neighbouring class.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64; 3],
            count: 5,
            center_jitter: 3.0,
            outer_axes: [0.34, 0.42],
            gray_thickness: [3.0, 4.5],
            fold_amplitude: 0.0,
            fold_frequency: 5,
            intensity_means: [20.0, 110.0, 170.0],
            intensity_sigma: 12.0,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::field("phantom.dims", "every dim must be >= 8"));
        }
        if self.count == 0 {
            return Err(Error::field("phantom.count", "must be >= 1"));
        }
        let [lo, hi] = self.outer_axes;
        if !(0.0 < lo && lo <= hi && hi < 0.5) {
            return Err(Error::field("phantom.outer_axes", "need 0 < min <= max < 0.5"));
        }
        let [tlo, thi] = self.gray_thickness;
        let smallest = lo * *self.dims.iter().min().expect("three dims") as f64;
        if !(0.0 < tlo && tlo <= thi && thi < smallest) {
            return Err(Error::field(
                "phantom.gray_thickness",
                "need 0 < min <= max and a white core inside the gray shell",
            ));
        }
        if !(0.0..0.5).contains(&self.fold_amplitude) {
            return Err(Error::field("phantom.fold_amplitude", "must be in [0, 0.5)"));
        }
        if !(self.center_jitter >= 0.0) {
            return Err(Error::field("phantom.center_jitter", "must be >= 0"));
        }
        if !(self.intensity_sigma >= 0.0) || self.intensity_means.iter().any(|m| !m.is_finite()) {
            return Err(Error::field("phantom.intensity_sigma", "must be >= 0 with finite means"));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::field("phantom.label_noise", "must be in [0, 0.5)"));
        }
        Ok(())
    }

    pub fn volume_seed(&self, index: usize) -> u64 {
        self.seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// One generated subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub intensity: Volume,
    /// Labels as emitted for training (with label noise applied).
    pub labels: LabelVolume,
    /// Labels before label noise.
    pub clean: LabelVolume,
}

struct Geometry {
    center: [f64; 3],
    outer: [f64; 3],
    inner: [f64; 3],
    fold_phase: f64,
}

impl Geometry {
    fn label(&self, p: [f64; 3], spec: &PhantomSpec) -> u8 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let rho = |a: [f64; 3]| ((d[0] / a[0]).powi(2) + (d[1] / a[1]).powi(2) + (d[2] / a[2]).powi(2)).sqrt();
        if rho(self.outer) > 1.0 {
            return BACKGROUND;
        }
        let angle = d[1].atan2(d[2]);
        let elevation = d[0] / self.outer[0];
        let fold = 1.0
            + spec.fold_amplitude
                * (spec.fold_frequency as f64 * angle + self.fold_phase).sin()
                * (std::f64::consts::PI * elevation).cos();
        if rho(self.inner) * fold > 1.0 {
            GRAY
        } else {
            WHITE
        }
    }
}

fn neighbours(dims: Dims, v: usize) -> impl Iterator<Item = usize> {
    let [d, h, w] = dims;
    let (z, y, x) = (v / (h * w), (v / w) % h, v % w);
    let mut out = [None; 6];
    if z > 0 {
        out[0] = Some(v - h * w);
    }
    if z + 1 < d {
        out[1] = Some(v + h * w);
    }
    if y > 0 {
        out[2] = Some(v - w);
    }
    if y + 1 < h {
        out[3] = Some(v + w);
    }
    if x > 0 {
        out[4] = Some(v - 1);
    }
    if x + 1 < w {
        out[5] = Some(v + 1);
    }
    out.into_iter().flatten()
}

/// Voxels with a 6-neighbour of a different label.
pub fn boundary_mask(labels: &LabelVolume) -> Vec<bool> {
    let l = labels.labels();
    (0..l.len())
        .map(|v| neighbours(labels.dims(), v).any(|n| l[n] != l[v]))
        .collect()
}

/// Relabels each boundary voxel with probability `rate` to one of the
/// differing labels among its 6-neighbours, chosen uniformly.
pub fn corrupt_boundaries<R: Rng + ?Sized>(clean: &LabelVolume, rate: f64, rng: &mut R) -> LabelVolume {
    let l = clean.labels();
    let mut out = l.to_vec();
    if rate > 0.0 {
        for (v, on_boundary) in boundary_mask(clean).into_iter().enumerate() {
            if !on_boundary || rng.random::<f64>() >= rate {
                continue;
            }
            let mut options: Vec<u8> = neighbours(clean.dims(), v)
                .map(|n| l[n])
                .filter(|&c| c != l[v])
                .collect();
            options.sort_unstable();
            options.dedup();
            out[v] = options[rng.random_range(0..options.len())];
        }
    }
    LabelVolume::new(clean.dims(), clean.num_classes(), out).expect("labels stay in range")
}

pub fn generate(spec: &PhantomSpec, index: usize) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.volume_seed(index));
    let dims = spec.dims;
    let j = spec.center_jitter;
    let center: [f64; 3] = std::array::from_fn(|a| {
        dims[a] as f64 / 2.0 + if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 }
    });
    let [alo, ahi] = spec.outer_axes;
    let outer: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * rng.random_range(alo..=ahi));
    let [tlo, thi] = spec.gray_thickness;
    let thickness = rng.random_range(tlo..=thi);
    let geo = Geometry {
        center,
        outer,
        inner: outer.map(|r| r - thickness),
        fold_phase: rng.random_range(0.0..std::f64::consts::TAU),
    };
    let [_, h, w] = dims;
    let clean_labels: Vec<u8> = (0..dims.iter().product::<usize>())
        .map(|v| {
            let p = [(v / (h * w)) as f64 + 0.5, ((v / w) % h) as f64 + 0.5, (v % w) as f64 + 0.5];
            geo.label(p, spec)
        })
        .collect();
    let clean = LabelVolume::new(dims, NUM_CLASSES, clean_labels)?;
    let noise = Normal::new(0.0f32, spec.intensity_sigma)
        .map_err(|e| Error::field("phantom.intensity_sigma", e.to_string()))?;
    let data = clean
        .labels()
        .iter()
        .map(|&l| spec.intensity_means[l as usize] + noise.sample(&mut rng))
        .collect();
    let intensity = Volume::new(1, dims, data)?;
    let labels = corrupt_boundaries(&clean, spec.label_noise, &mut rng);
    Ok(Phantom {
        intensity,
        labels,
        clean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub intensity: PathBuf,
    pub labels: PathBuf,
    pub clean_labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: PhantomSpec,
    /// Paths relative to the manifest's directory.
    pub entries: Vec<DatasetEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes every phantom as VVOL files plus `manifest.json` into `dir`.
pub fn write_dataset(spec: &PhantomSpec, dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let p = generate(spec, i)?;
        let entry = DatasetEntry {
            intensity: format!("phantom_{i:03}.vvol").into(),
            labels: format!("phantom_{i:03}_labels.vvol").into(),
            clean_labels: format!("phantom_{i:03}_clean.vvol").into(),
        };
        vvol::write_volume(&p.intensity, &dir.join(&entry.intensity))?;
        vvol::write_labels(&p.labels, &dir.join(&entry.labels))?;
        vvol::write_labels(&p.clean, &dir.join(&entry.clean_labels))?;
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

/// A loaded training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub intensity: Volume,
    pub labels: LabelVolume,
}

/// Loads entries `indices` of a dataset; `clean` selects the uncorrupted labels.
pub fn load_subjects(dir: &Path, indices: &[usize], clean: bool) -> Result<Vec<Subject>> {
    let manifest = read_manifest(dir)?;
    indices
        .iter()
        .map(|&i| {
            let e = manifest.entries.get(i).ok_or_else(|| {
                Error::InvalidConfig(format!("dataset has {} entries, asked for {i}", manifest.entries.len()))
            })?;
            let labels = if clean { &e.clean_labels } else { &e.labels };
            Ok(Subject {
                intensity: vvol::read_volume(&dir.join(&e.intensity))?,
                labels: vvol::read_labels(&dir.join(labels))?,
            })
        })
        .collect()
}
