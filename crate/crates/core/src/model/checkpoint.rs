//! Checkpoint files.
//!
//! Layout: the line `meshseg-checkpoint v1`, a line holding the byte length of
//! the JSON manifest, the manifest itself, then every tensor as raw
//! little-endian `f32` in manifest order. Per convolution: weights, bias, and
//! with batchnorm its scale, shift, running mean and running variance.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::network::{ConvParams, Model};
use crate::model::spec::ModelSpec;
use crate::ops::batchnorm::BatchNormState;
use crate::ops::conv::Kernel;
use crate::sampler::{plan_inference, CoveragePlan, SamplerConfig};
use crate::volume::Dims;
use crate::train::normalize::Normalization;

const MAGIC: &str = "meshseg-checkpoint v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ModelSpec,
    /// Training sampler; its side is the model's input side.
    pub sampler: SamplerConfig,
    pub normalization: Normalization,
    pub batches_trained: usize,
    pub seed: u64,
    pub batchnorm_momentum: f64,
    pub batchnorm_epsilon: f64,
    pub tensors: Vec<TensorEntry>,
}

/// A trained model plus what inference needs to reproduce training conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub sampler: SamplerConfig,
    pub normalization: Normalization,
    pub batches_trained: usize,
    pub seed: u64,
}

fn tensors(model: &Model<f32>) -> Vec<(String, &[f32])> {
    let mut out = Vec::new();
    for (i, p) in model.convs().iter().enumerate() {
        out.push((format!("conv{i}.weights"), p.kernel.weights.as_slice()));
        out.push((format!("conv{i}.bias"), p.kernel.bias.as_slice()));
        if let Some(bn) = &p.batchnorm {
            out.push((format!("conv{i}.bn.gamma"), bn.gamma.as_slice()));
            out.push((format!("conv{i}.bn.beta"), bn.beta.as_slice()));
            out.push((format!("conv{i}.bn.running_mean"), bn.running_mean.as_slice()));
            out.push((format!("conv{i}.bn.running_var"), bn.running_var.as_slice()));
        }
    }
    out
}

impl Checkpoint {
    pub fn side(&self) -> usize {
        self.sampler.side
    }

    /// Inference plan for `dims`: the grid plus `sampled` refs from the
    /// training Gaussian, seeded by `seed`.
    pub fn plan(&self, dims: Dims, sampled: usize, seed: u64) -> Result<CoveragePlan> {
        plan_inference(dims, &self.sampler, sampled, seed)
    }

    pub fn manifest(&self) -> Manifest {
        let (momentum, epsilon) = self
            .model
            .convs()
            .iter()
            .find_map(|p| p.batchnorm.as_ref().map(|b| (b.momentum, b.epsilon)))
            .unwrap_or((
                crate::ops::batchnorm::DEFAULT_MOMENTUM,
                crate::ops::batchnorm::DEFAULT_EPSILON,
            ));
        Manifest {
            spec: self.model.spec().clone(),
            sampler: self.sampler.clone(),
            normalization: self.normalization,
            batches_trained: self.batches_trained,
            seed: self.seed,
            batchnorm_momentum: momentum,
            batchnorm_epsilon: epsilon,
            tensors: tensors(&self.model)
                .into_iter()
                .map(|(name, data)| TensorEntry {
                    name,
                    len: data.len(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest =
            serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        let mut out = format!("{MAGIC}\n{}\n{manifest}", manifest.len()).into_bytes();
        for (_, data) in tensors(&self.model) {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (manifest, payload) = split_manifest(bytes, origin)?;
        let bad = |message: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            message,
        };
        let expected: usize = manifest.tensors.iter().map(|t| t.len).sum::<usize>() * 4;
        if payload.len() != expected {
            return Err(bad(format!(
                "payload holds {} bytes, manifest describes {expected}",
                payload.len()
            )));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut entries = manifest.tensors.iter();
        let mut take = |name: String| -> Result<Vec<f32>> {
            match entries.next() {
                Some(t) if t.name == name => Ok(floats.by_ref().take(t.len).collect()),
                Some(t) => Err(bad(format!("expected tensor {name}, found {}", t.name))),
                None => Err(bad(format!("missing tensor {name}"))),
            }
        };
        let mut convs = Vec::new();
        for (i, (_, c)) in manifest.spec.conv_layers().enumerate() {
            let weights = take(format!("conv{i}.weights"))?;
            let bias = take(format!("conv{i}.bias"))?;
            let kernel = Kernel::new(c.out_channels, c.in_channels, c.extent(), weights, bias)?;
            let batchnorm = if c.batchnorm {
                Some(BatchNormState {
                    gamma: take(format!("conv{i}.bn.gamma"))?,
                    beta: take(format!("conv{i}.bn.beta"))?,
                    running_mean: take(format!("conv{i}.bn.running_mean"))?,
                    running_var: take(format!("conv{i}.bn.running_var"))?,
                    momentum: manifest.batchnorm_momentum,
                    epsilon: manifest.batchnorm_epsilon,
                })
            } else {
                None
            };
            convs.push(ConvParams { kernel, batchnorm });
        }
        if entries.next().is_some() {
            return Err(bad("manifest lists unused tensors".into()));
        }
        let model = Model::from_parts(manifest.spec, convs)?;
        if let Some((idx, v)) = tensors(&model)
            .iter()
            .flat_map(|(_, d)| d.iter())
            .enumerate()
            .find(|(_, v)| !v.is_finite())
        {
            return Err(Error::NonFiniteValue { index: idx, value: *v });
        }
        Ok(Self {
            model,
            sampler: manifest.sampler,
            normalization: manifest.normalization,
            batches_trained: manifest.batches_trained,
            seed: manifest.seed,
        })
    }
}

fn split_manifest<'a>(bytes: &'a [u8], origin: &Path) -> Result<(Manifest, &'a [u8])> {
    let bad = |message: &str| Error::Checkpoint {
        path: origin.to_path_buf(),
        message: message.to_string(),
    };
    let mut rest = bytes;
    let mut line = || -> Result<&'a str> {
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        let text = std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))?;
        rest = &rest[end + 1..];
        Ok(text)
    };
    if line()? != MAGIC {
        return Err(bad("not a meshseg checkpoint"));
    }
    let len: usize = line()?
        .parse()
        .map_err(|_| bad("manifest length is not a number"))?;
    if rest.len() < len {
        return Err(bad("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&rest[..len])
        .map_err(|e| bad(&format!("manifest: {e}")))?;
    Ok((manifest, &rest[len..]))
}

/// Reads only the manifest, without decoding tensors.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path)?;
    Ok(split_manifest(&bytes, path)?.0)
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes, path)
}
