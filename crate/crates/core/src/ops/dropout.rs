//! Inverted dropout, applied per voxel-channel element.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tensor::{Scalar, Tensor};

pub fn check_probability(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidProbability(p))
    }
}

/// In train mode each element is zeroed with probability `p` and survivors are
/// scaled by `1 / (1 - p)`. Returns the multiplicative mask used, if any.
pub fn dropout_forward<S: Scalar, R: Rng + ?Sized>(
    x: &Tensor<S>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<S>, Option<Vec<S>>)> {
    check_probability(p)?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = S::narrow(1.0 / (1.0 - p));
    let mask: Vec<S> = (0..x.data().len())
        .map(|_| if rng.random::<f64>() < p { S::ZERO } else { keep })
        .collect();
    let mut y = x.clone();
    for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
        *v = S::narrow(v.widen() * m.widen());
    }
    Ok((y, Some(mask)))
}

pub fn dropout_backward<S: Scalar>(grad_out: &Tensor<S>, mask: Option<&[S]>) -> Result<Tensor<S>> {
    let Some(mask) = mask else {
        return Ok(grad_out.clone());
    };
    if mask.len() != grad_out.data().len() {
        return Err(Error::shape("dropout mask does not match gradient"));
    }
    let mut g = grad_out.clone();
    for (v, &m) in g.data_mut().iter_mut().zip(mask) {
        *v = S::narrow(v.widen() * m.widen());
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ones(n: usize) -> Tensor<f32> {
        Tensor::from_vec([1, 1, 1, 1, n], vec![1.0; n]).unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec([1, 1, 1, 1, 3], vec![1.0f32, -2.0, 3.5]).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let (y, mask) = dropout_forward(&x, 0.0, mode, &mut rng).unwrap();
            assert_eq!(y, x);
            assert!(mask.is_none());
        }
    }

    #[test]
    fn eval_mode_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = ones(10);
        assert_eq!(dropout_forward(&x, 0.5, Mode::Eval, &mut rng).unwrap().0, x);
    }

    #[test]
    fn rejects_bad_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in [1.0, -0.1, 1.5] {
            assert!(matches!(
                dropout_forward(&ones(2), p, Mode::Train, &mut rng),
                Err(Error::InvalidProbability(_))
            ));
        }
    }

    #[test]
    fn train_mode_preserves_expectation() {
        // 10,000 trials of one activation of value 2 at p = 0.25.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = 0.25;
        let x = Tensor::from_vec([1, 1, 1, 1, 1], vec![2.0f64]).unwrap();
        let trials = 10_000;
        let mut sum = 0.0;
        for _ in 0..trials {
            sum += dropout_forward(&x, p, Mode::Train, &mut rng).unwrap().0.data()[0];
        }
        let mean = sum / trials as f64;
        // Each draw is 2/(1-p) w.p. 1-p, else 0.
        let sd = 2.0 / (1.0 - p) * (p * (1.0 - p)).sqrt();
        let three_sigma = 3.0 * sd / (trials as f64).sqrt();
        assert!((mean - 2.0).abs() < three_sigma, "mean {mean}, 3 sigma {three_sigma}");
    }

    #[test]
    fn backward_applies_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ones(64);
        let (y, mask) = dropout_forward(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let g = dropout_backward(&x, mask.as_deref()).unwrap();
        assert_eq!(g, y);
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
