//! Mini-batch training: Gaussian-sampled subvolumes, fused softmax
//! cross-entropy, Adam updates, periodic validation by full inference.

pub mod adam;
pub mod loss;
pub mod normalize;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SegmentationReport;
use crate::model::Model;
use crate::ops::Mode;
use crate::phantom::Subject;
use crate::sampler::{plan_inference, worker_seed, GaussianSampler, SamplerConfig};
use crate::stitch::{segment_volume, InferenceOptions};
use crate::tensor::Tensor;
use crate::volume::Volume;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{cross_entropy, softmax_cross_entropy};
pub use normalize::{normalize, Normalization};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub batches: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Validate every this many batches; 0 disables validation.
    pub validation_every: usize,
    /// Sampled subvolumes per validation volume on top of the grid.
    pub validation_subvolumes: usize,
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            batches: 2000,
            adam: AdamConfig::default(),
            seed: 0,
            validation_every: 0,
            validation_subvolumes: 8,
            normalization: Normalization::MinMax,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::field("train.batch_size", "must be >= 1"));
        }
        self.adam.validate()?;
        self.normalization.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub batch: usize,
    pub loss: f64,
    /// Mean validation DICE per class, when validation ran after this batch.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation_dice: Option<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    pub log: Vec<LogRecord>,
}

/// Forward, loss, backward, and one Adam update on a prepared batch.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Model<f32>,
    adam: &mut AdamState,
    input: &Tensor<f32>,
    targets: &[u8],
    rng: &mut R,
) -> Result<f64> {
    let (logits, trace) = model.forward_train(input, Mode::Train, rng)?;
    let (loss, grad) = softmax_cross_entropy(&logits, targets)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            batch: adam.t as usize,
            detail: format!("loss {loss}"),
        });
    }
    let (grads, _) = model.backward(&grad, &trace)?;
    if !grads.is_finite() {
        return Err(Error::NonFiniteLoss {
            batch: adam.t as usize,
            detail: "non-finite gradient".into(),
        });
    }
    let slices = grads.slices();
    adam_step(&mut model.param_slices_mut(), &slices, adam)?;
    Ok(loss)
}

/// A fresh optimizer state sized for `model`.
pub fn adam_for(model: &mut Model<f32>, config: AdamConfig) -> Result<AdamState> {
    let lengths: Vec<usize> = model.param_slices_mut().iter().map(|s| s.len()).collect();
    AdamState::new(config, &lengths)
}

/// Mean DICE per class over `subjects`, segmenting each with a grid plus
/// `sampled` Gaussian subvolumes.
pub fn validate_dice(
    model: &Model<f32>,
    subjects: &[Subject],
    sampler: &SamplerConfig,
    sampled: usize,
    normalization: Normalization,
) -> Result<Vec<Option<f64>>> {
    let n = model.spec().num_classes;
    let mut sums = vec![Some(0.0); n];
    for s in subjects {
        let plan = plan_inference(s.intensity.dims(), sampler, sampled, sampler.seed)?;
        let pred = segment_volume(model, &s.intensity, &plan, normalization, InferenceOptions::default())?;
        let report = SegmentationReport::new(&pred, &s.labels)?;
        for (c, sum) in sums.iter_mut().enumerate() {
            *sum = sum.zip(report.dice(c)).map(|(a, b)| a + b);
        }
    }
    let count = subjects.len().max(1) as f64;
    Ok(sums.into_iter().map(|s| s.map(|v| v / count)).collect())
}

/// Trains `model` in place. Every step picks a subject uniformly, draws a
/// Gaussian-placed subvolume from it, and extracts intensities and labels with
/// the same placement. `on_record` sees each log line as it is produced.
pub fn train(
    model: &mut Model<f32>,
    subjects: &[Subject],
    validation: &[Subject],
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    sampler.validate()?;
    if cfg.batches > 0 && subjects.is_empty() {
        return Err(Error::InvalidConfig("training needs at least one subject".into()));
    }
    let classes = model.spec().num_classes;
    for s in subjects.iter().chain(validation) {
        if s.intensity.dims() != s.labels.dims() {
            return Err(Error::shape("intensity and label dims differ"));
        }
        if s.intensity.channels() != model.spec().input_channels {
            return Err(Error::shape("subject channels do not match the model"));
        }
        if s.labels.num_classes() != classes {
            return Err(Error::shape("subject classes do not match the model"));
        }
    }
    let normalized: Vec<Volume> = subjects
        .iter()
        .map(|s| cfg.normalization.apply(&s.intensity))
        .collect::<Result<_>>()?;
    let mut samplers: Vec<GaussianSampler> = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| GaussianSampler::with_seed(sampler, s.intensity.dims(), worker_seed(cfg.seed, i + 1)))
        .collect::<Result<_>>()?;
    let mut pick = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD1B5_4A32_D192_ED03);
    let mut adam = adam_for(model, cfg.adam)?;
    let mut summary = TrainSummary {
        losses: Vec::with_capacity(cfg.batches),
        log: Vec::with_capacity(cfg.batches),
    };
    for batch in 0..cfg.batches {
        let mut inputs = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size * sampler.side.pow(3));
        for _ in 0..cfg.batch_size {
            let i = pick.random_range(0..subjects.len());
            let r = samplers[i].next_ref();
            inputs.push(normalized[i].extract(&r)?);
            targets.extend_from_slice(subjects[i].labels.extract(&r)?.labels());
        }
        let input = Tensor::from_volumes(&inputs)?;
        let loss = train_step(model, &mut adam, &input, &targets, &mut dropout_rng).map_err(|e| match e {
            Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { batch, detail },
            other => other,
        })?;
        let validation_dice = if cfg.validation_every > 0
            && !validation.is_empty()
            && ((batch + 1) % cfg.validation_every == 0 || batch + 1 == cfg.batches)
        {
            Some(validate_dice(
                model,
                validation,
                sampler,
                cfg.validation_subvolumes,
                cfg.normalization,
            )?)
        } else {
            None
        };
        let record = LogRecord {
            batch,
            loss,
            validation_dice,
        };
        on_record(&record)?;
        summary.losses.push(loss);
        summary.log.push(record);
    }
    Ok(summary)
}
