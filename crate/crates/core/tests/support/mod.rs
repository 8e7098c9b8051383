//! Independent reference implementations and finite-difference gradient
//! checks, shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use meshseg::model::{LayerSpec, Model, ModelSpec};
use meshseg::ops::activation::{
    relu_backward, relu_forward, softmax_backward, softmax_voxelwise, tanh_backward, tanh_forward,
};
use meshseg::ops::batchnorm::BatchNormState;
use meshseg::ops::conv::{conv3d_backward, conv3d_forward, ConvConfig, Kernel};
use meshseg::ops::dropout::{dropout_backward, dropout_forward};
use meshseg::ops::pool::{maxpool3d_backward, maxpool3d_forward, upsample3d_backward, upsample3d_forward};
use meshseg::ops::{Activation, Mode};
use meshseg::tensor::Tensor;
use meshseg::train::loss::{cross_entropy, softmax_cross_entropy};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod votes;

pub const STEP: f64 = 1e-3;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-6;

pub fn random_tensor(rng: &mut impl Rng, shape: [usize; 5], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so kinks at 0 sit far outside the FD step.
pub fn random_away_from_zero(rng: &mut impl Rng, shape: [usize; 5]) -> Tensor<f64> {
    let mut t = random_tensor(rng, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

pub fn random_kernel(rng: &mut impl Rng, cout: usize, cin: usize, extent: [usize; 3]) -> Kernel<f64> {
    let n = cout * cin * extent.iter().product::<usize>();
    Kernel::new(
        cout,
        cin,
        extent,
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Dilated convolution by direct summation over output voxels and kernel
/// taps. Tap `(kz, ky, kx)` sits at offset `(kz - cz, ...)` from the kernel
/// centre and reads the input at `p_c - l * offset`, where `p_c` is the input
/// voxel under the output's centre and out-of-range reads are zero.
pub fn oracle_conv(input: &Tensor<f64>, kernel: &Kernel<f64>, dilation: usize, pad: [usize; 3]) -> Tensor<f64> {
    let [n, cin, d, h, w] = input.shape();
    let [ez, ey, ex] = kernel.extent();
    let half = [ez / 2, ey / 2, ex / 2];
    let l = dilation as isize;
    let out_dim = |size: usize, p: usize, e: usize| (size + 2 * p) as isize - l * (e as isize - 1);
    let (od, oh, ow) = (out_dim(d, pad[0], ez), out_dim(h, pad[1], ey), out_dim(w, pad[2], ex));
    assert!(od > 0 && oh > 0 && ow > 0);
    let (od, oh, ow) = (od as usize, oh as usize, ow as usize);
    let cout = kernel.out_channels();
    let mut out = Tensor::zeros([n, cout, od, oh, ow]);
    for b in 0..n {
        for o in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        // Centre of the dilated window in unpadded input coordinates.
                        let cz = z as isize - pad[0] as isize + l * half[0] as isize;
                        let cy = y as isize - pad[1] as isize + l * half[1] as isize;
                        let cx = x as isize - pad[2] as isize + l * half[2] as isize;
                        let mut acc = kernel.bias[o];
                        for i in 0..cin {
                            for kz in 0..ez {
                                for ky in 0..ey {
                                    for kx in 0..ex {
                                        let dz = kz as isize - half[0] as isize;
                                        let dy = ky as isize - half[1] as isize;
                                        let dx = kx as isize - half[2] as isize;
                                        let (iz, iy, ix) = (cz - l * dz, cy - l * dy, cx - l * dx);
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d || iy >= h || ix >= w {
                                            continue;
                                        }
                                        let wv = kernel.weights[kernel.weight_index(o, i, kz, ky, kx)];
                                        acc += wv * input.plane(b, i)[(iz * h + iy) * w + ix];
                                    }
                                }
                            }
                        }
                        out.plane_mut(b, o)[(z * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Worst max-abs deviation of the library convolution from [`oracle_conv`]
/// over `cases` random configurations (spatial <= 9, channels <= 4,
/// dilation 1..=3).
pub fn conv_oracle_sweep(cases: usize, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut ran = 0;
    while ran < cases {
        let dilation = rng.random_range(1..=3usize);
        let extent: [usize; 3] = std::array::from_fn(|_| *[1usize, 3, 3, 5].choose(&mut rng).unwrap());
        let dims: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=9usize));
        let pad: [usize; 3] = std::array::from_fn(|_| rng.random_range(0..=2 * dilation));
        let fits = (0..3).all(|a| dims[a] + 2 * pad[a] > dilation * (extent[a] - 1));
        if !fits {
            continue;
        }
        let (cin, cout) = (rng.random_range(1..=4usize), rng.random_range(1..=4usize));
        let batch = rng.random_range(1..=2usize);
        let x = random_tensor(&mut rng, [batch, cin, dims[0], dims[1], dims[2]], -1.0, 1.0);
        let k = random_kernel(&mut rng, cout, cin, extent);
        let cfg = ConvConfig {
            dilation,
            padding: pad,
        };
        let fast = conv3d_forward(&x, &k, &cfg).unwrap();
        let slow = oracle_conv(&x, &k, dilation, pad);
        assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            worst = worst.max((a - b).abs());
        }
        ran += 1;
    }
    (worst, ran)
}

pub fn cast_kernel(k: &Kernel<f64>) -> Kernel<f32> {
    Kernel::new(
        k.out_channels(),
        k.in_channels(),
        k.extent(),
        k.weights.iter().map(|&v| v as f32).collect(),
        k.bias.iter().map(|&v| v as f32).collect(),
    )
    .unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences of `f` with respect to every element of `values`.
pub fn numeric_grad(values: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = values.to_vec();
    (0..values.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + STEP;
            let up = f(&work);
            work[i] = orig - STEP;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

pub fn worst_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// `sum(r * y)`: a generic scalar loss whose gradient wrt `y` is `r`.
pub fn dot(r: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    r.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

fn with_data(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(t.shape(), data.to_vec()).unwrap()
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub worst: f64,
    pub components: usize,
    /// Draws rejected because they straddle a kink at this step size.
    pub skipped: usize,
    /// Smallest acceptable `components`.
    pub required: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst <= GRAD_TOLERANCE && self.components >= self.required
    }
}

fn check(name: &str, analytic: &[f64], numeric: &[f64]) -> GradCheck {
    GradCheck {
        name: name.to_string(),
        worst: worst_rel_err(analytic, numeric),
        components: analytic.len(),
        skipped: 0,
        required: analytic.len(),
    }
}

pub fn conv_checks(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = [
        // (batch, cin, cout, dims, extent, dilation, pad)
        (1, 1, 1, 5, 3, 2, 2),
        (1, 2, 3, 5, 3, 2, 2),
        (2, 2, 2, 4, 3, 1, 1),
        (1, 2, 2, 6, 3, 3, 1),
        (1, 3, 2, 3, 1, 1, 0),
    ];
    let mut out = Vec::new();
    for (n, cin, cout, s, e, l, p) in cases {
        let x = random_tensor(&mut rng, [n, cin, s, s, s], -1.0, 1.0);
        let k = random_kernel(&mut rng, cout, cin, [e; 3]);
        let cfg = ConvConfig::new(l, p);
        let y = conv3d_forward(&x, &k, &cfg).unwrap();
        let r = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
        let g = conv3d_backward(&r, &x, &k, &cfg).unwrap();
        let tag = format!("conv3d {e}^3 dil {l} pad {p} {cin}->{cout}");
        let num_x = numeric_grad(x.data(), |d| dot(&r, &conv3d_forward(&with_data(&x, d), &k, &cfg).unwrap()));
        out.push(check(&format!("{tag}: input"), g.input.data(), &num_x));
        let num_w = numeric_grad(&k.weights, |d| {
            let mut k2 = k.clone();
            k2.weights.copy_from_slice(d);
            dot(&r, &conv3d_forward(&x, &k2, &cfg).unwrap())
        });
        out.push(check(&format!("{tag}: weights"), &g.weights, &num_w));
        let num_b = numeric_grad(&k.bias, |d| {
            let mut k2 = k.clone();
            k2.bias.copy_from_slice(d);
            dot(&r, &conv3d_forward(&x, &k2, &cfg).unwrap())
        });
        out.push(check(&format!("{tag}: bias"), &g.bias, &num_b));
    }
    out
}

pub fn batchnorm_checks(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, [2, 3, 3, 3, 3], -2.0, 3.0);
    let mut bn = BatchNormState::<f64>::new(3);
    for c in 0..3 {
        bn.gamma[c] = rng.random_range(0.5..1.5);
        bn.beta[c] = rng.random_range(-0.5..0.5);
        bn.running_mean[c] = rng.random_range(-0.5..0.5);
        bn.running_var[c] = rng.random_range(0.5..2.0);
    }
    let r = random_tensor(&mut rng, x.shape(), -1.0, 1.0);
    let train = |state: &BatchNormState<f64>, x: &Tensor<f64>| dot(&r, &state.forward_batch(x).unwrap().0);
    let (_, cache, _, _) = bn.forward_batch(&x).unwrap();
    let g = bn.backward(&r, &cache).unwrap();
    let mut out = vec![check(
        "batchnorm train: input",
        g.input.data(),
        &numeric_grad(x.data(), |d| train(&bn, &with_data(&x, d))),
    )];
    let num_gamma = numeric_grad(&bn.gamma, |d| {
        let mut s = bn.clone();
        s.gamma.copy_from_slice(d);
        train(&s, &x)
    });
    out.push(check("batchnorm train: gamma", &g.gamma, &num_gamma));
    let num_beta = numeric_grad(&bn.beta, |d| {
        let mut s = bn.clone();
        s.beta.copy_from_slice(d);
        train(&s, &x)
    });
    out.push(check("batchnorm train: beta", &g.beta, &num_beta));
    let ge = bn.backward_eval(&r).unwrap();
    out.push(check(
        "batchnorm eval: input",
        ge.data(),
        &numeric_grad(x.data(), |d| dot(&r, &bn.forward_eval(&with_data(&x, d)).unwrap())),
    ));
    out
}

pub fn elementwise_checks(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let x = random_away_from_zero(&mut rng, [2, 3, 3, 3, 3]);
    let r = random_tensor(&mut rng, x.shape(), -1.0, 1.0);

    let y = relu_forward(&x);
    let g = relu_backward(&r, &y).unwrap();
    out.push(check("relu", g.data(), &numeric_grad(x.data(), |d| dot(&r, &relu_forward(&with_data(&x, d))))));

    let y = tanh_forward(&x);
    let g = tanh_backward(&r, &y).unwrap();
    out.push(check("tanh", g.data(), &numeric_grad(x.data(), |d| dot(&r, &tanh_forward(&with_data(&x, d))))));

    let logits = random_tensor(&mut rng, [2, 4, 2, 3, 2], -3.0, 3.0);
    let rs = random_tensor(&mut rng, logits.shape(), -1.0, 1.0);
    let y = softmax_voxelwise(&logits);
    let g = softmax_backward(&rs, &y).unwrap();
    out.push(check(
        "softmax",
        g.data(),
        &numeric_grad(logits.data(), |d| dot(&rs, &softmax_voxelwise(&with_data(&logits, d)))),
    ));

    let drop = |x: &Tensor<f64>| {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        dropout_forward(x, 0.3, Mode::Train, &mut rng).unwrap()
    };
    let (_, mask) = drop(&x);
    let g = dropout_backward(&r, mask.as_deref()).unwrap();
    out.push(check("dropout p=0.3", g.data(), &numeric_grad(x.data(), |d| dot(&r, &drop(&with_data(&x, d)).0))));

    // Maxpool on a 4^3 input of well-separated distinct values.
    let mut values: Vec<f64> = (0..2 * 64).map(|i| i as f64 * 0.05).collect();
    values.shuffle(&mut rng);
    let xp = Tensor::from_vec([1, 2, 4, 4, 4], values).unwrap();
    let (yp, idx) = maxpool3d_forward(&xp).unwrap();
    let rp = random_tensor(&mut rng, yp.shape(), -1.0, 1.0);
    let g = maxpool3d_backward(&rp, &idx).unwrap();
    out.push(check(
        "maxpool 2^3 on 4^3",
        g.data(),
        &numeric_grad(xp.data(), |d| dot(&rp, &maxpool3d_forward(&with_data(&xp, d)).unwrap().0)),
    ));

    let xu = random_tensor(&mut rng, [1, 2, 2, 3, 2], -1.0, 1.0);
    let yu = upsample3d_forward(&xu);
    let ru = random_tensor(&mut rng, yu.shape(), -1.0, 1.0);
    let g = upsample3d_backward(&ru).unwrap();
    out.push(check(
        "upsample 2^3",
        g.data(),
        &numeric_grad(xu.data(), |d| dot(&ru, &upsample3d_forward(&with_data(&xu, d)))),
    ));
    out
}

pub fn loss_checks(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (shape, label) in [([1, 3, 2, 2, 2], "2^3 volume"), ([2, 4, 2, 3, 2], "batch of two")] {
        let logits = random_tensor(&mut rng, shape, -3.0, 3.0);
        let voxels = shape[0] * shape[2] * shape[3] * shape[4];
        let targets: Vec<u8> = (0..voxels).map(|_| rng.random_range(0..shape[1] as u8)).collect();
        let (_, g) = softmax_cross_entropy(&logits, &targets).unwrap();
        // Finite differences of the composed (unfused) softmax then CE.
        let num = numeric_grad(logits.data(), |d| {
            cross_entropy(&softmax_voxelwise(&with_data(&logits, d)), &targets).unwrap()
        });
        out.push(check(&format!("softmax+cross-entropy, {label}"), g.data(), &num));
    }
    out
}

fn model_loss(model: &Model<f64>, x: &Tensor<f64>, targets: &[u8], dropout_seed: u64) -> f64 {
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let (logits, _) = m.forward_train(x, Mode::Train, &mut rng).unwrap();
    softmax_cross_entropy(&logits, targets).unwrap().0
}

/// Whole-network checks: every parameter tensor (subsampled to `per_tensor`
/// entries) and the input.
/// Central difference at `step`, or `None` when the half-step estimate
/// disagrees (a ReLU or max-pool switch lies inside the stencil).
fn smooth_difference(mut eval: impl FnMut(f64) -> f64, step: f64) -> Option<f64> {
    let full = (eval(step) - eval(-step)) / (2.0 * step);
    let half = (eval(step / 2.0) - eval(-step / 2.0)) / step;
    (rel_err(full, half) <= GRAD_TOLERANCE / 4.0).then_some(full)
}

/// Spot-checks `per_tensor` components of every parameter tensor and the input.
pub fn network_check(
    name: &str,
    spec: ModelSpec,
    dims: [usize; 3],
    per_tensor: usize,
    step: f64,
    seed: u64,
) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f32>::init(spec.clone(), seed).unwrap().cast::<f64>();
    // Non-trivial batchnorm affine parameters and biases.
    for p in model.convs_mut() {
        for b in &mut p.kernel.bias {
            *b = rng.random_range(-0.2..0.2);
        }
        if let Some(bn) = &mut p.batchnorm {
            for g in &mut bn.gamma {
                *g = rng.random_range(0.5..1.5);
            }
            for b in &mut bn.beta {
                *b = rng.random_range(-0.3..0.3);
            }
        }
    }
    let x = random_tensor(&mut rng, [2, spec.input_channels, dims[0], dims[1], dims[2]], 0.0, 1.0);
    let voxels = 2 * dims.iter().product::<usize>();
    let targets: Vec<u8> = (0..voxels).map(|_| rng.random_range(0..spec.num_classes as u8)).collect();
    let dropout_seed = 5;

    let mut m = model.clone();
    let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let (logits, trace) = m.forward_train(&x, Mode::Train, &mut drng).unwrap();
    let (_, grad) = softmax_cross_entropy(&logits, &targets).unwrap();
    let (grads, grad_input) = model.backward(&grad, &trace).unwrap();
    let mut analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    analytic.push(grad_input.data().to_vec());

    let tensors = analytic.len();
    (0..tensors)
        .map(|t| {
            let mut picks: Vec<usize> = (0..analytic[t].len()).collect();
            picks.shuffle(&mut rng);
            let (mut a, mut n, mut skipped) = (Vec::new(), Vec::new(), 0);
            for &i in &picks {
                if a.len() == per_tensor {
                    break;
                }
                let eval = |delta: f64| {
                    if t + 1 == tensors {
                        let mut xd = x.clone();
                        xd.data_mut()[i] += delta;
                        model_loss(&model, &xd, &targets, dropout_seed)
                    } else {
                        let mut probe = model.clone();
                        probe.param_slices_mut()[t][i] += delta;
                        model_loss(&probe, &x, &targets, dropout_seed)
                    }
                };
                match smooth_difference(eval, step) {
                    Some(d) => {
                        a.push(analytic[t][i]);
                        n.push(d);
                    }
                    None => skipped += 1,
                }
            }
            let label = if t + 1 == tensors {
                format!("{name}: input")
            } else {
                format!("{name}: parameter tensor {t}")
            };
            let mut c = check(&label, &a, &n);
            c.skipped = skipped;
            c.required = per_tensor.min(picks.len()).div_ceil(2);
            c
        })
        .collect()
}

/// Swaps ReLU for tanh so finite differences see a smooth loss.
pub fn smooth(mut spec: ModelSpec) -> ModelSpec {
    for layer in &mut spec.layers {
        if let LayerSpec::Conv(c) = layer {
            if c.activation == Activation::Relu {
                c.activation = Activation::Tanh;
            }
        }
    }
    spec
}

pub fn network_checks(seed: u64) -> Vec<GradCheck> {
    let mut out = network_check(
        "meshnet (tanh, bn, dropout 0.2)",
        smooth(ModelSpec::meshnet("g", 1, 3, 3, &[1, 2], 0.2).unwrap()),
        [5, 5, 5],
        40,
        STEP,
        seed,
    );
    out.extend(network_check(
        "meshnet (relu, bn, dropout 0.2)",
        ModelSpec::meshnet("g", 1, 3, 3, &[1, 2], 0.2).unwrap(),
        [5, 5, 5],
        20,
        STEP,
        seed + 1,
    ));
    out.extend(network_check(
        "unet (tanh, width 2)",
        smooth(ModelSpec::unet(1, 3, 2).unwrap()),
        [16, 16, 16],
        20,
        STEP / 10.0,
        seed + 2,
    ));
    out
}

/// Every gradient check in the suite.
pub fn all_gradient_checks(seed: u64) -> Vec<GradCheck> {
    let mut out = conv_checks(seed);
    out.extend(batchnorm_checks(seed + 1));
    out.extend(elementwise_checks(seed + 2));
    out.extend(loss_checks(seed + 3));
    out.extend(network_checks(seed + 4));
    out
}
