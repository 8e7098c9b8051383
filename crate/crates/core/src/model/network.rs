//! Parameters and execution of a [`ModelSpec`]: forward in eval or train mode,
//! and the backward pass over a recorded train-mode trace.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::spec::{LayerSpec, ModelSpec};
use crate::ops::activation::softmax_voxelwise;
use crate::ops::batchnorm::{BatchNormCache, BatchNormState};
use crate::ops::conv::{conv3d_backward, conv3d_forward, Kernel};
use crate::ops::dropout::{dropout_backward, dropout_forward};
use crate::ops::pool::{
    maxpool3d_backward, maxpool3d_forward, upsample3d_backward, upsample3d_forward, PoolIndices,
};
use crate::ops::Mode;
use crate::tensor::{concat_channels, split_channels, Scalar, Tensor};
use crate::volume::Dims;

/// Learnable state of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<S = f32> {
    pub kernel: Kernel<S>,
    pub batchnorm: Option<BatchNormState<S>>,
}

/// A network: its spec plus parameters for each convolution, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S = f32> {
    spec: ModelSpec,
    convs: Vec<ConvParams<S>>,
}

/// Gradients mirroring [`ConvParams`]; batchnorm entries are empty without batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParamGrads<S = f32> {
    pub weights: Vec<S>,
    pub bias: Vec<S>,
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads<S = f32> {
    pub convs: Vec<ConvParamGrads<S>>,
}

impl<S: Scalar> ModelGrads<S> {
    /// Flat views in the same order as [`Model::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[S]> {
        let mut out = Vec::new();
        for g in &self.convs {
            out.push(g.weights.as_slice());
            out.push(g.bias.as_slice());
            if !g.gamma.is_empty() {
                out.push(g.gamma.as_slice());
                out.push(g.beta.as_slice());
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.widen().is_finite()))
    }
}

enum Record<S> {
    Conv {
        input: Tensor<S>,
        bn: BnRecord<S>,
        activated: Tensor<S>,
        mask: Option<Vec<S>>,
    },
    MaxPool(PoolIndices),
    Upsample,
    Concat { channels: usize },
}

enum BnRecord<S> {
    Absent,
    Batch(BatchNormCache<S>),
    /// Eval mode: values normalized with the running statistics.
    Running(Tensor<S>),
}

/// Everything a backward pass needs from a train-mode forward.
pub struct Trace<S = f32> {
    records: Vec<Record<S>>,
    input_shape: [usize; 5],
}

impl<S: Scalar> Model<S> {
    /// He-style uniform initialization: weights in `±sqrt(6 / fan_in)`, zero
    /// biases, unit batchnorm scale and zero shift. Deterministic in `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        for (_, c) in spec.conv_layers() {
            let fan_in = (c.in_channels * c.kernel.pow(3)) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let weights = (0..c.weight_count())
                .map(|_| S::narrow(rng.random_range(-bound..bound)))
                .collect();
            let kernel = Kernel::new(
                c.out_channels,
                c.in_channels,
                c.extent(),
                weights,
                vec![S::ZERO; c.out_channels],
            )?;
            let batchnorm = c.batchnorm.then(|| BatchNormState::new(c.out_channels));
            convs.push(ConvParams { kernel, batchnorm });
        }
        Ok(Self { spec, convs })
    }

    /// Assembles a model from explicit parameters, checking them against the spec.
    pub fn from_parts(spec: ModelSpec, convs: Vec<ConvParams<S>>) -> Result<Self> {
        spec.validate()?;
        let layers: Vec<_> = spec.conv_layers().collect();
        if layers.len() != convs.len() {
            return Err(Error::shape(format!(
                "spec has {} convolutions, got parameters for {}",
                layers.len(),
                convs.len()
            )));
        }
        for ((idx, c), p) in layers.iter().zip(&convs) {
            let k = &p.kernel;
            if k.out_channels() != c.out_channels
                || k.in_channels() != c.in_channels
                || k.extent() != c.extent()
            {
                return Err(Error::shape(format!("layer {idx}: kernel does not match spec")));
            }
            match (&p.batchnorm, c.batchnorm) {
                (Some(bn), true) if bn.channels() == c.out_channels => bn.validate()?,
                (None, false) => {}
                _ => {
                    return Err(Error::shape(format!(
                        "layer {idx}: batchnorm state does not match spec"
                    )))
                }
            }
        }
        Ok(Self { spec, convs })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn convs(&self) -> &[ConvParams<S>] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [ConvParams<S>] {
        &mut self.convs
    }

    /// Sets the running-statistics momentum of every batchnorm layer.
    pub fn set_batchnorm_momentum(&mut self, momentum: f64) -> Result<()> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::field("train.batchnorm_momentum", "must be in (0, 1]"));
        }
        for bn in self.convs.iter_mut().filter_map(|p| p.batchnorm.as_mut()) {
            bn.momentum = momentum;
        }
        Ok(())
    }

    /// Mutable flat views of every learnable tensor: per convolution the
    /// weights, bias, then batchnorm scale and shift when present.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        let mut out = Vec::new();
        for p in &mut self.convs {
            out.push(p.kernel.weights.as_mut_slice());
            out.push(p.kernel.bias.as_mut_slice());
            if let Some(bn) = &mut p.batchnorm {
                out.push(bn.gamma.as_mut_slice());
                out.push(bn.beta.as_mut_slice());
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.convs
            .iter()
            .map(|p| {
                p.kernel.parameter_count() + p.batchnorm.as_ref().map_or(0, |b| 2 * b.channels())
            })
            .sum()
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        let cast_vec = |v: &[S]| v.iter().map(|x| T::narrow(x.widen())).collect::<Vec<T>>();
        let convs = self
            .convs
            .iter()
            .map(|p| ConvParams {
                kernel: Kernel::new(
                    p.kernel.out_channels(),
                    p.kernel.in_channels(),
                    p.kernel.extent(),
                    cast_vec(&p.kernel.weights),
                    cast_vec(&p.kernel.bias),
                )
                .expect("cast preserves kernel shape"),
                batchnorm: p.batchnorm.as_ref().map(|b| BatchNormState {
                    gamma: cast_vec(&b.gamma),
                    beta: cast_vec(&b.beta),
                    running_mean: cast_vec(&b.running_mean),
                    running_var: cast_vec(&b.running_var),
                    momentum: b.momentum,
                    epsilon: b.epsilon,
                }),
            })
            .collect();
        Model {
            spec: self.spec.clone(),
            convs,
        }
    }

    fn check_input(&self, input: &Tensor<S>) -> Result<Vec<Dims>> {
        if input.channels() != self.spec.input_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {}",
                self.spec.input_channels,
                input.channels()
            )));
        }
        self.spec.layer_dims(input.dims())
    }

    fn check_dims(idx: usize, out: &Tensor<S>, expected: Dims) -> Result<()> {
        if out.dims() != expected {
            return Err(Error::shape(format!(
                "layer {idx} produced {:?}, expected {expected:?}",
                out.dims()
            )));
        }
        Ok(())
    }

    /// Eval-mode forward returning class scores (pre-softmax).
    pub fn forward_logits(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let dims = self.check_input(input)?;
        let mut outputs: Vec<Tensor<S>> = Vec::with_capacity(self.spec.layers.len());
        let keep = self.kept_outputs();
        let mut current = input.clone();
        let mut conv_idx = 0;
        for (idx, layer) in self.spec.layers.iter().enumerate() {
            current = match layer {
                LayerSpec::Conv(c) => {
                    let p = &self.convs[conv_idx];
                    conv_idx += 1;
                    let mut y = conv3d_forward(&current, &p.kernel, &c.config())?;
                    if let Some(bn) = &p.batchnorm {
                        y = bn.forward_eval(&y)?;
                    }
                    c.activation.forward(&y)
                }
                LayerSpec::MaxPool => maxpool3d_forward(&current)?.0,
                LayerSpec::Upsample => upsample3d_forward(&current),
                LayerSpec::ConcatSkip { source } => concat_channels(&current, &outputs[*source])?,
            };
            Self::check_dims(idx, &current, dims[idx])?;
            // Only skip sources are needed later; keep placeholders otherwise.
            outputs.push(if keep[idx] { current.clone() } else { Tensor::zeros([0; 5]) });
        }
        Ok(current)
    }

    /// Eval-mode forward followed by the voxel-wise softmax head.
    pub fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(softmax_voxelwise(&self.forward_logits(input)?))
    }

    fn kept_outputs(&self) -> Vec<bool> {
        let mut keep = vec![false; self.spec.layers.len()];
        for (src, _) in self.spec.skips() {
            keep[src] = true;
        }
        keep
    }

    /// Forward in `mode`, recording what [`Model::backward`] needs. In train
    /// mode batchnorm uses batch statistics (and updates its running averages)
    /// and dropout draws from `rng`.
    pub fn forward_train<R: Rng + ?Sized>(
        &mut self,
        input: &Tensor<S>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<S>, Trace<S>)> {
        let dims = self.check_input(input)?;
        let keep = self.kept_outputs();
        let mut outputs: Vec<Tensor<S>> = Vec::with_capacity(self.spec.layers.len());
        let mut records = Vec::with_capacity(self.spec.layers.len());
        let mut current = input.clone();
        let mut conv_idx = 0;
        for (idx, layer) in self.spec.layers.iter().enumerate() {
            let (next, record) = match layer {
                LayerSpec::Conv(c) => {
                    let p = &mut self.convs[conv_idx];
                    conv_idx += 1;
                    let y = conv3d_forward(&current, &p.kernel, &c.config())?;
                    let (y, bn) = match &mut p.batchnorm {
                        Some(state) => match state.forward(&y, mode)? {
                            (out, Some(cache)) => (out, BnRecord::Batch(cache)),
                            (out, None) => (out, BnRecord::Running(running_normalized(state, &y))),
                        },
                        None => (y, BnRecord::Absent),
                    };
                    let activated = c.activation.forward(&y);
                    let (out, mask) = dropout_forward(&activated, c.dropout, mode, rng)?;
                    let record = Record::Conv {
                        input: current,
                        bn,
                        activated,
                        mask,
                    };
                    (out, record)
                }
                LayerSpec::MaxPool => {
                    let (y, indices) = maxpool3d_forward(&current)?;
                    (y, Record::MaxPool(indices))
                }
                LayerSpec::Upsample => (upsample3d_forward(&current), Record::Upsample),
                LayerSpec::ConcatSkip { source } => {
                    let channels = current.channels();
                    (concat_channels(&current, &outputs[*source])?, Record::Concat { channels })
                }
            };
            Self::check_dims(idx, &next, dims[idx])?;
            outputs.push(if keep[idx] { next.clone() } else { Tensor::zeros([0; 5]) });
            records.push(record);
            current = next;
        }
        Ok((
            current,
            Trace {
                records,
                input_shape: input.shape(),
            },
        ))
    }

    /// Backpropagates `grad_logits` (gradient with respect to the final layer
    /// output) through a trace. Returns parameter gradients and the gradient
    /// with respect to the network input.
    pub fn backward(&self, grad_logits: &Tensor<S>, trace: &Trace<S>) -> Result<(ModelGrads<S>, Tensor<S>)> {
        let layers = &self.spec.layers;
        if trace.records.len() != layers.len() {
            return Err(Error::shape("trace does not belong to this model"));
        }
        let mut pending: Vec<Option<Tensor<S>>> = vec![None; layers.len()];
        let mut conv_grads: Vec<Option<ConvParamGrads<S>>> = vec![None; self.convs.len()];
        let mut conv_idx = self.convs.len();
        let mut grad = grad_logits.clone();
        for idx in (0..layers.len()).rev() {
            if let Some(extra) = pending[idx].take() {
                grad.same_shape(&extra, "skip gradient")?;
                for (g, e) in grad.data_mut().iter_mut().zip(extra.data()) {
                    *g = S::narrow(g.widen() + e.widen());
                }
            }
            grad = match (&layers[idx], &trace.records[idx]) {
                (
                    LayerSpec::Conv(c),
                    Record::Conv {
                        input,
                        bn,
                        activated,
                        mask,
                    },
                ) => {
                    conv_idx -= 1;
                    let p = &self.convs[conv_idx];
                    let g = dropout_backward(&grad, mask.as_deref())?;
                    let g = c.activation.backward(&g, activated)?;
                    let (g, gamma, beta) = match (&p.batchnorm, bn) {
                        (Some(state), BnRecord::Batch(cache)) => {
                            let bg = state.backward(&g, cache)?;
                            (bg.input, bg.gamma, bg.beta)
                        }
                        (Some(state), BnRecord::Running(normalized)) => {
                            let (gamma, beta) = affine_grads(&g, normalized);
                            (state.backward_eval(&g)?, gamma, beta)
                        }
                        (None, BnRecord::Absent) => (g, Vec::new(), Vec::new()),
                        _ => return Err(Error::shape("trace does not belong to this model")),
                    };
                    let cg = conv3d_backward(&g, input, &p.kernel, &c.config())?;
                    conv_grads[conv_idx] = Some(ConvParamGrads {
                        weights: cg.weights,
                        bias: cg.bias,
                        gamma,
                        beta,
                    });
                    cg.input
                }
                (LayerSpec::MaxPool, Record::MaxPool(indices)) => maxpool3d_backward(&grad, indices)?,
                (LayerSpec::Upsample, Record::Upsample) => upsample3d_backward(&grad)?,
                (LayerSpec::ConcatSkip { source }, Record::Concat { channels }) => {
                    let (main, skip) = split_channels(&grad, *channels)?;
                    match &mut pending[*source] {
                        Some(acc) => {
                            for (a, s) in acc.data_mut().iter_mut().zip(skip.data()) {
                                *a = S::narrow(a.widen() + s.widen());
                            }
                        }
                        slot => *slot = Some(skip),
                    }
                    main
                }
                _ => return Err(Error::shape("trace does not belong to this model")),
            };
        }
        if grad.shape() != trace.input_shape {
            return Err(Error::shape("input gradient shape mismatch"));
        }
        let convs = conv_grads
            .into_iter()
            .map(|g| g.expect("every convolution visited"))
            .collect();
        Ok((ModelGrads { convs }, grad))
    }
}

fn running_normalized<S: Scalar>(state: &BatchNormState<S>, x: &Tensor<S>) -> Tensor<S> {
    let mut out = x.clone();
    for n in 0..x.batch() {
        for c in 0..x.channels() {
            let mean = state.running_mean[c].widen();
            let istd = 1.0 / (state.running_var[c].widen() + state.epsilon).sqrt();
            for v in out.plane_mut(n, c) {
                *v = S::narrow((v.widen() - mean) * istd);
            }
        }
    }
    out
}

/// Per-channel `sum(g * normalized)` and `sum(g)`.
fn affine_grads<S: Scalar>(grad: &Tensor<S>, normalized: &Tensor<S>) -> (Vec<S>, Vec<S>) {
    let channels = grad.channels();
    let (mut gamma, mut beta) = (vec![0.0; channels], vec![0.0; channels]);
    for n in 0..grad.batch() {
        for c in 0..channels {
            for (g, h) in grad.plane(n, c).iter().zip(normalized.plane(n, c)) {
                gamma[c] += g.widen() * h.widen();
                beta[c] += g.widen();
            }
        }
    }
    (
        gamma.into_iter().map(S::narrow).collect(),
        beta.into_iter().map(S::narrow).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::build_meshnet;

    fn small_meshnet() -> ModelSpec {
        ModelSpec::meshnet("t", 1, 3, 4, &[1, 2], 0.0).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = Model::<f32>::init(small_meshnet(), 7).unwrap();
        let b = Model::<f32>::init(small_meshnet(), 7).unwrap();
        let c = Model::<f32>::init(small_meshnet(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let first = &a.convs()[0];
        let bound = (6.0f32 / 27.0).sqrt();
        assert!(first.kernel.weights.iter().all(|w| w.abs() <= bound));
        assert!(first.kernel.bias.iter().all(|&b| b == 0.0));
        let bn = first.batchnorm.as_ref().unwrap();
        assert!(bn.gamma.iter().all(|&g| g == 1.0) && bn.beta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_count_matches_spec() {
        let spec = build_meshnet(68, 1, 3, 0.0).unwrap();
        let model = Model::<f32>::init(spec, 0).unwrap();
        assert_eq!(model.parameter_count(), 72_516);
        let total: usize = model.clone().param_slices_mut().iter().map(|s| s.len()).sum();
        assert_eq!(total, 72_516);
    }

    #[test]
    fn forward_produces_probabilities() {
        let model = Model::<f32>::init(small_meshnet(), 1).unwrap();
        let x = Tensor::from_vec([2, 1, 5, 5, 5], (0..250).map(|v| (v % 7) as f32 / 7.0).collect())
            .unwrap();
        let p = model.forward(&x).unwrap();
        assert_eq!(p.shape(), [2, 3, 5, 5, 5]);
        for n in 0..2 {
            for v in 0..125 {
                let s: f32 = (0..3).map(|c| p.plane(n, c)[v]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(model.forward(&x).unwrap(), p);
    }

    #[test]
    fn eval_trace_matches_eval_forward() {
        let mut model = Model::<f32>::init(small_meshnet(), 1).unwrap();
        let x = Tensor::from_vec([1, 1, 4, 4, 4], (0..64).map(|v| v as f32 / 64.0).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, _) = model.forward_train(&x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y, model.forward_logits(&x).unwrap());
    }

    #[test]
    fn wrong_input_channels_rejected() {
        let model = Model::<f32>::init(small_meshnet(), 1).unwrap();
        let x = Tensor::zeros([1, 2, 4, 4, 4]);
        assert!(matches!(model.forward(&x), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn from_parts_checks_shapes() {
        let model = Model::<f32>::init(small_meshnet(), 1).unwrap();
        let mut convs = model.convs().to_vec();
        assert!(Model::from_parts(small_meshnet(), convs.clone()).is_ok());
        convs[0].batchnorm = None;
        assert!(Model::from_parts(small_meshnet(), convs).is_err());
    }
}
