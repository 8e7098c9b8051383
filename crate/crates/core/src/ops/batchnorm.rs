//! Per-channel batch normalization over the batch and spatial axes.

use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<S = f32> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub running_mean: Vec<S>,
    /// Unbiased batch variance, exponentially averaged.
    pub running_var: Vec<S>,
    pub momentum: f64,
    pub epsilon: f64,
}

/// What the backward pass needs from a train-mode forward.
#[derive(Clone, Debug)]
pub struct BatchNormCache<S = f32> {
    pub normalized: Tensor<S>,
    pub inv_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormGrads<S = f32> {
    pub input: Tensor<S>,
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
}

impl<S: Scalar> BatchNormState<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![S::ONE; channels],
            beta: vec![S::ZERO; channels],
            running_mean: vec![S::ZERO; channels],
            running_var: vec![S::ONE; channels],
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::shape("batchnorm parameter lengths differ"));
        }
        if !(self.epsilon > 0.0)
            || !(self.momentum > 0.0 && self.momentum <= 1.0)
            || self.running_var.iter().any(|v| v.widen() < 0.0)
        {
            return Err(Error::InvalidConfig(
                "batchnorm needs epsilon > 0, momentum in (0, 1] and non-negative running variance".into(),
            ));
        }
        Ok(())
    }

    fn check(&self, x: &Tensor<S>) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::shape(format!(
                "batchnorm over {} channels got {}",
                self.channels(),
                x.channels()
            )));
        }
        Ok(())
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// averages; eval mode applies the running statistics.
    pub fn forward(
        &mut self,
        x: &Tensor<S>,
        mode: Mode,
    ) -> Result<(Tensor<S>, Option<BatchNormCache<S>>)> {
        self.check(x)?;
        match mode {
            Mode::Eval => Ok((self.forward_eval(x)?, None)),
            Mode::Train => {
                let (y, cache, mean, var) = self.forward_batch(x)?;
                let count = (x.batch() * x.spatial()) as f64;
                let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for c in 0..self.channels() {
                    let m = self.momentum;
                    self.running_mean[c] =
                        S::narrow((1.0 - m) * self.running_mean[c].widen() + m * mean[c]);
                    self.running_var[c] =
                        S::narrow((1.0 - m) * self.running_var[c].widen() + m * var[c] * unbiased);
                }
                Ok((y, Some(cache)))
            }
        }
    }

    pub fn forward_eval(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check(x)?;
        let mut y = x.clone();
        let spatial = x.spatial();
        for c in 0..self.channels() {
            let scale = self.gamma[c].widen() / (self.running_var[c].widen() + self.epsilon).sqrt();
            let shift = self.beta[c].widen() - self.running_mean[c].widen() * scale;
            for n in 0..x.batch() {
                let start = (n * x.channels() + c) * spatial;
                for v in &mut y.data_mut()[start..start + spatial] {
                    *v = S::narrow(v.widen() * scale + shift);
                }
            }
        }
        Ok(y)
    }

    /// Normalizes with the statistics of `x` itself. Returns output, cache,
    /// and the biased per-channel mean and variance.
    #[allow(clippy::type_complexity)]
    pub fn forward_batch(
        &self,
        x: &Tensor<S>,
    ) -> Result<(Tensor<S>, BatchNormCache<S>, Vec<f64>, Vec<f64>)> {
        self.check(x)?;
        let channels = self.channels();
        let count = (x.batch() * x.spatial()) as f64;
        let mut means = vec![0.0; channels];
        let mut vars = vec![0.0; channels];
        let mut inv_std = vec![0.0; channels];
        let mut normalized = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for c in 0..channels {
            let mut sum = 0.0;
            for n in 0..x.batch() {
                sum += x.plane(n, c).iter().map(|v| v.widen()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for n in 0..x.batch() {
                sq += x
                    .plane(n, c)
                    .iter()
                    .map(|v| {
                        let d = v.widen() - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            let var = sq / count;
            let istd = 1.0 / (var + self.epsilon).sqrt();
            let (g, b) = (self.gamma[c].widen(), self.beta[c].widen());
            for n in 0..x.batch() {
                let src = x.plane(n, c);
                let xh: Vec<f64> = src.iter().map(|v| (v.widen() - mean) * istd).collect();
                for (d, &h) in normalized.plane_mut(n, c).iter_mut().zip(&xh) {
                    *d = S::narrow(h);
                }
                for (d, &h) in y.plane_mut(n, c).iter_mut().zip(&xh) {
                    *d = S::narrow(g * h + b);
                }
            }
            means[c] = mean;
            vars[c] = var;
            inv_std[c] = istd;
        }
        Ok((y, BatchNormCache { normalized, inv_std }, means, vars))
    }

    /// Backward of the train-mode (batch statistics) forward.
    pub fn backward(&self, grad_out: &Tensor<S>, cache: &BatchNormCache<S>) -> Result<BatchNormGrads<S>> {
        grad_out.same_shape(&cache.normalized, "batchnorm backward")?;
        let channels = self.channels();
        let count = (grad_out.batch() * grad_out.spatial()) as f64;
        let mut grad_in = Tensor::zeros(grad_out.shape());
        let mut gamma = vec![S::ZERO; channels];
        let mut beta = vec![S::ZERO; channels];
        for c in 0..channels {
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for n in 0..grad_out.batch() {
                for (g, h) in grad_out.plane(n, c).iter().zip(cache.normalized.plane(n, c)) {
                    sum_g += g.widen();
                    sum_gx += g.widen() * h.widen();
                }
            }
            gamma[c] = S::narrow(sum_gx);
            beta[c] = S::narrow(sum_g);
            let scale = self.gamma[c].widen() * cache.inv_std[c] / count;
            for n in 0..grad_out.batch() {
                let g = grad_out.plane(n, c);
                let h = cache.normalized.plane(n, c);
                for ((d, g), h) in grad_in.plane_mut(n, c).iter_mut().zip(g).zip(h) {
                    *d = S::narrow(scale * (count * g.widen() - sum_g - h.widen() * sum_gx));
                }
            }
        }
        Ok(BatchNormGrads {
            input: grad_in,
            gamma,
            beta,
        })
    }

    /// Backward of the eval-mode forward (a fixed affine map per channel).
    pub fn backward_eval(&self, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        self.check(grad_out)?;
        let mut g = grad_out.clone();
        let spatial = g.spatial();
        let channels = g.channels();
        for n in 0..g.batch() {
            for c in 0..channels {
                let scale = self.gamma[c].widen() / (self.running_var[c].widen() + self.epsilon).sqrt();
                let start = (n * channels + c) * spatial;
                for v in &mut g.data_mut()[start..start + spatial] {
                    *v = S::narrow(v.widen() * scale);
                }
            }
        }
        Ok(g)
    }
}
