//! Standard and dilated volumetric convolution with zero padding.
//!
//! A kernel of extent `(2c+1, 2b+1, 2a+1)` evaluated at output voxel `p`
//! computes
//!
//! ```text
//! out[o](p) = bias[o] + sum_i sum_{z',y',x'} k[o,i](z',y',x') * f[i](p_c - l*(z',y',x'))
//! ```
//!
//! where `p_c` is the input voxel the output is centred on and `l` is the
//! dilation; offsets `z'` run over `-c..=c`. Storage index `kz` of a kernel
//! tap corresponds to offset `kz - c`.
//!
//! The fast path zero-pads each input channel once into an `f64` buffer and
//! lays output rows out with the padded row stride, so every kernel tap becomes
//! a single contiguous multiply-add run over a whole output plane. The columns
//! past the real output width are scratch and dropped when writing back.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::volume::{Dims, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct Kernel<S = f32> {
    out_channels: usize,
    in_channels: usize,
    extent: [usize; 3],
    /// Layout `[out][in][kz][ky][kx]`.
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Kernel<S> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        extent: [usize; 3],
        weights: Vec<S>,
        bias: Vec<S>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::InvalidConfig("kernel needs at least one channel".into()));
        }
        if extent.iter().any(|&e| e == 0 || e % 2 == 0) {
            return Err(Error::InvalidConfig(format!(
                "kernel extents must be odd and >= 1, got {extent:?}"
            )));
        }
        let taps: usize = extent.iter().product();
        if weights.len() != out_channels * in_channels * taps || bias.len() != out_channels {
            return Err(Error::shape(format!(
                "kernel {out_channels}x{in_channels}x{extent:?} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            extent,
            weights,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, extent: [usize; 3]) -> Result<Self> {
        let taps: usize = extent.iter().product();
        Self::new(
            out_channels,
            in_channels,
            extent,
            vec![S::ZERO; out_channels * in_channels * taps],
            vec![S::ZERO; out_channels],
        )
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn extent(&self) -> [usize; 3] {
        self.extent
    }

    pub fn taps(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    #[inline]
    pub fn weight_index(&self, o: usize, i: usize, kz: usize, ky: usize, kx: usize) -> usize {
        (((o * self.in_channels + i) * self.extent[0] + kz) * self.extent[1] + ky) * self.extent[2]
            + kx
    }

    /// Weight at signed tap offset `(dz, dy, dx)` relative to the kernel centre.
    pub fn at_offset(&self, o: usize, i: usize, dz: isize, dy: isize, dx: isize) -> S {
        let h = self.half_extent();
        let idx = self.weight_index(
            o,
            i,
            (dz + h[0]) as usize,
            (dy + h[1]) as usize,
            (dx + h[2]) as usize,
        );
        self.weights[idx]
    }

    /// `(c, b, a)`: the kernel bounds per axis.
    pub fn half_extent(&self) -> [isize; 3] {
        self.extent.map(|e| (e / 2) as isize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvConfig {
    pub dilation: usize,
    pub padding: [usize; 3],
}

impl ConvConfig {
    pub fn new(dilation: usize, padding: usize) -> Self {
        Self {
            dilation,
            padding: [padding; 3],
        }
    }

    /// Padding that keeps spatial dims unchanged for an odd kernel.
    pub fn same(dilation: usize, extent: usize) -> Self {
        Self::new(dilation, dilation * (extent - 1) / 2)
    }
}

/// `out = in + 2*pad - l*(k - 1)` per axis.
pub fn conv_output_dims(input: Dims, extent: [usize; 3], cfg: &ConvConfig) -> Result<Dims> {
    if cfg.dilation == 0 {
        return Err(Error::InvalidConfig("dilation must be >= 1".into()));
    }
    let mut out = [0; 3];
    for a in 0..3 {
        let padded = input[a] + 2 * cfg.padding[a];
        let span = cfg.dilation * (extent[a] - 1);
        if padded <= span {
            return Err(Error::InvalidConfig(format!(
                "axis {a}: padded extent {padded} leaves no output for dilated span {}",
                span + 1
            )));
        }
        out[a] = padded - span;
    }
    Ok(out)
}

/// Taps of one kernel plane: they read the same padded input plane.
struct TapGroup {
    dz: usize,
    /// In-plane offsets, in storage order of the taps.
    offsets: Vec<usize>,
    /// Storage index of the group's first tap.
    first: usize,
}

/// Geometry shared by the forward and backward passes.
struct Geometry {
    in_dims: Dims,
    out_dims: Dims,
    padded: Dims,
    groups: Vec<TapGroup>,
    max_plane_offset: usize,
    /// Length of one contiguous multiply-add run covering an output plane.
    run: usize,
}

impl Geometry {
    fn new<S: Scalar>(in_dims: Dims, kernel: &Kernel<S>, cfg: &ConvConfig) -> Result<Self> {
        let out_dims = conv_output_dims(in_dims, kernel.extent, cfg)?;
        let padded = [0, 1, 2].map(|a| in_dims[a] + 2 * cfg.padding[a]);
        let l = cfg.dilation;
        let [ez, ey, ex] = kernel.extent;
        let mut groups = Vec::with_capacity(ez);
        for kz in 0..ez {
            // Offset -l * (k - centre) on the input, shifted into the padded frame.
            let mut offsets = Vec::with_capacity(ey * ex);
            for ky in 0..ey {
                for kx in 0..ex {
                    offsets.push(l * (ey - 1 - ky) * padded[2] + l * (ex - 1 - kx));
                }
            }
            groups.push(TapGroup {
                dz: l * (ez - 1 - kz),
                offsets,
                first: kz * ey * ex,
            });
        }
        let max_plane_offset = l * (ey - 1) * padded[2] + l * (ex - 1);
        let run = (out_dims[1] - 1) * padded[2] + out_dims[2];
        Ok(Self {
            in_dims,
            out_dims,
            padded,
            groups,
            max_plane_offset,
            run,
        })
    }

    fn padded_plane(&self) -> usize {
        self.padded[1] * self.padded[2]
    }

    fn padded_volume(&self) -> usize {
        self.padded[0] * self.padded_plane()
    }
}

/// Zero-pads every `(n, c)` channel into a contiguous `f64` buffer.
fn pad_channels<S: Scalar>(x: &Tensor<S>, geo: &Geometry, pad: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = geo.in_dims;
    let [_, hp, wp] = geo.padded;
    let vol = geo.padded_volume();
    let planes = x.batch() * x.channels();
    let mut out = vec![0.0f64; planes * vol];
    out.par_chunks_mut(vol)
        .zip(x.data().par_chunks(d * h * w))
        .for_each(|(dst, src)| {
            for z in 0..d {
                for y in 0..h {
                    let s = (z * h + y) * w;
                    let t = ((z + pad[0]) * hp + y + pad[1]) * wp + pad[2];
                    for (o, &v) in dst[t..t + w].iter_mut().zip(&src[s..s + w]) {
                        *o = v.widen();
                    }
                }
            }
        });
    out
}

#[inline(always)]
fn axpy(acc: &mut [f64], w: f64, src: &[f64]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a += w * s;
    }
}

/// `acc[p] += w[t] * src[p + offs[t]]` for every tap `t`, added in tap order.
///
/// Nine-tap groups (one kernel plane of a 3x3x3 kernel) are fused so each
/// accumulator is loaded and stored once per group.
#[inline(always)]
fn gather_taps(acc: &mut [f64], src: &[f64], offs: &[usize], ws: &[f64]) {
    let n = acc.len();
    if offs.len() == 9 {
        let s: [&[f64]; 9] = std::array::from_fn(|t| &src[offs[t]..offs[t] + n]);
        let w: [f64; 9] = std::array::from_fn(|t| ws[t]);
        for p in 0..n {
            let mut a = acc[p];
            a += w[0] * s[0][p];
            a += w[1] * s[1][p];
            a += w[2] * s[2][p];
            a += w[3] * s[3][p];
            a += w[4] * s[4][p];
            a += w[5] * s[5][p];
            a += w[6] * s[6][p];
            a += w[7] * s[7][p];
            a += w[8] * s[8][p];
            acc[p] = a;
        }
    } else {
        for (&o, &w) in offs.iter().zip(ws) {
            axpy(acc, w, &src[o..o + n]);
        }
    }
}

/// Eight interleaved partial sums, combined in a fixed order.
#[inline(always)]
fn reduce_lanes(lanes: &[f64; 8]) -> f64 {
    ((lanes[0] + lanes[4]) + (lanes[2] + lanes[6])) + ((lanes[1] + lanes[5]) + (lanes[3] + lanes[7]))
}

/// `sums[t] += <g, src[offs[t]..]>` for every tap `t`.
#[inline(always)]
fn dot_taps(sums: &mut [f64], g: &[f64], src: &[f64], offs: &[usize]) {
    let n = g.len();
    let chunks = n / 8;
    if offs.len() == 9 {
        let s: [&[f64]; 9] = std::array::from_fn(|t| &src[offs[t]..offs[t] + n]);
        let mut lanes = [[0.0f64; 8]; 9];
        for c in 0..chunks {
            let b = c * 8;
            let gc = &g[b..b + 8];
            for (lane, st) in lanes.iter_mut().zip(&s) {
                let sc = &st[b..b + 8];
                for k in 0..8 {
                    lane[k] += gc[k] * sc[k];
                }
            }
        }
        for (t, lane) in lanes.iter().enumerate() {
            let mut tail = 0.0;
            for p in chunks * 8..n {
                tail += g[p] * s[t][p];
            }
            sums[t] += reduce_lanes(lane) + tail;
        }
    } else {
        for (sum, &o) in sums.iter_mut().zip(offs) {
            let st = &src[o..o + n];
            let mut lane = [0.0f64; 8];
            for c in 0..chunks {
                let b = c * 8;
                for k in 0..8 {
                    lane[k] += g[b + k] * st[b + k];
                }
            }
            let mut tail = 0.0;
            for p in chunks * 8..n {
                tail += g[p] * st[p];
            }
            *sum += reduce_lanes(&lane) + tail;
        }
    }
}

fn check_input<S: Scalar>(input: &Tensor<S>, kernel: &Kernel<S>) -> Result<()> {
    if input.channels() != kernel.in_channels {
        return Err(Error::shape(format!(
            "input has {} channels, kernel expects {}",
            input.channels(),
            kernel.in_channels
        )));
    }
    Ok(())
}

/// Dilated volumetric convolution of a batch. Accumulates in `f64`.
pub fn conv3d_forward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Kernel<S>,
    cfg: &ConvConfig,
) -> Result<Tensor<S>> {
    check_input(input, kernel)?;
    let geo = Geometry::new(input.dims(), kernel, cfg)?;
    let padded = pad_channels(input, &geo, cfg.padding);
    let [dout, hout, wout] = geo.out_dims;
    let (cin, cout) = (kernel.in_channels, kernel.out_channels);
    let taps = kernel.taps();
    let (pplane, pvol, wp) = (geo.padded_plane(), geo.padded_volume(), geo.padded[2]);
    let weights: Vec<f64> = kernel.weights.iter().map(|w| w.widen()).collect();
    let out_len = dout * hout * wout;
    let mut out = Tensor::zeros([input.batch(), cout, dout, hout, wout]);

    out.data_mut()
        .par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(plane, dst)| {
            let (n, o) = (plane / cout, plane % cout);
            let bias = kernel.bias[o].widen();
            let mut acc = vec![0.0f64; geo.run];
            for z in 0..dout {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for i in 0..cin {
                    let channel = &padded[(n * cin + i) * pvol..(n * cin + i + 1) * pvol];
                    let w = &weights[(o * cin + i) * taps..(o * cin + i + 1) * taps];
                    for group in &geo.groups {
                        let src = &channel[(z + group.dz) * pplane..];
                        let ws = &w[group.first..group.first + group.offsets.len()];
                        gather_taps(&mut acc, src, &group.offsets, ws);
                    }
                }
                for y in 0..hout {
                    let row = &mut dst[(z * hout + y) * wout..(z * hout + y + 1) * wout];
                    for (d, a) in row.iter_mut().zip(&acc[y * wp..y * wp + wout]) {
                        *d = S::narrow(a + bias);
                    }
                }
            }
        });
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<S = f32> {
    pub input: Tensor<S>,
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

/// Gradients of a scalar loss through [`conv3d_forward`].
pub fn conv3d_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    kernel: &Kernel<S>,
    cfg: &ConvConfig,
) -> Result<ConvGrads<S>> {
    check_input(input, kernel)?;
    let geo = Geometry::new(input.dims(), kernel, cfg)?;
    let expected = [
        input.batch(),
        kernel.out_channels,
        geo.out_dims[0],
        geo.out_dims[1],
        geo.out_dims[2],
    ];
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "grad_out {:?} does not match forward output {expected:?}",
            grad_out.shape()
        )));
    }
    let batch = input.batch();
    let (cin, cout) = (kernel.in_channels, kernel.out_channels);
    let taps = kernel.taps();
    let [dout, hout, wout] = geo.out_dims;
    let (pplane, pvol, wp) = (geo.padded_plane(), geo.padded_volume(), geo.padded[2]);
    let run = geo.run;
    let weights: Vec<f64> = kernel.weights.iter().map(|w| w.widen()).collect();

    // Each output plane of grad_out in padded-row layout, preceded by `margin`
    // zeros so the input-gradient gather never reads before the plane.
    let margin = geo.max_plane_offset;
    let ext = margin + pplane;
    let mut g_ext = vec![0.0f64; batch * cout * dout * ext];
    g_ext
        .par_chunks_mut(dout * ext)
        .enumerate()
        .for_each(|(plane, dst)| {
            let (n, o) = (plane / cout, plane % cout);
            let src = grad_out.plane(n, o);
            for z in 0..dout {
                for y in 0..hout {
                    let s = (z * hout + y) * wout;
                    let t = z * ext + margin + y * wp;
                    for (d, v) in dst[t..t + wout].iter_mut().zip(&src[s..s + wout]) {
                        *d = v.widen();
                    }
                }
            }
        });
    let g_plane = |n: usize, o: usize, z: usize| -> &[f64] {
        let start = ((n * cout + o) * dout + z) * ext;
        &g_ext[start..start + ext]
    };

    let bias: Vec<S> = (0..cout)
        .map(|o| {
            let mut s = 0.0;
            for n in 0..batch {
                s += grad_out.plane(n, o).iter().map(|v| v.widen()).sum::<f64>();
            }
            S::narrow(s)
        })
        .collect();

    let padded = pad_channels(input, &geo, cfg.padding);
    let mut grad_w = vec![S::ZERO; kernel.weights.len()];
    grad_w
        .par_chunks_mut(taps)
        .enumerate()
        .for_each(|(pair, dst)| {
            let (o, i) = (pair / cin, pair % cin);
            let mut sums = vec![0.0f64; taps];
            for n in 0..batch {
                let channel = &padded[(n * cin + i) * pvol..(n * cin + i + 1) * pvol];
                for z in 0..dout {
                    let g = &g_plane(n, o, z)[margin..margin + run];
                    for group in &geo.groups {
                        let src = &channel[(z + group.dz) * pplane..];
                        let len = group.offsets.len();
                        dot_taps(&mut sums[group.first..group.first + len], g, src, &group.offsets);
                    }
                }
            }
            for (d, s) in dst.iter_mut().zip(sums) {
                *d = S::narrow(s);
            }
        });

    let [din, hin, win] = geo.in_dims;
    let pad = cfg.padding;
    // Only rows of the padded plane that map back onto real input rows.
    let row0 = pad[1] * wp;
    let span = hin * wp;
    let back_groups: Vec<(usize, Vec<usize>, usize)> = geo
        .groups
        .iter()
        .map(|g| {
            let offs = g.offsets.iter().map(|&o| margin + row0 - o).collect();
            (g.dz, offs, g.first)
        })
        .collect();
    let mut grad_in = Tensor::zeros(input.shape());
    grad_in
        .data_mut()
        .par_chunks_mut(din * hin * win)
        .enumerate()
        .for_each(|(plane, dst)| {
            let (n, i) = (plane / cin, plane % cin);
            let mut acc = vec![0.0f64; span];
            for zi in 0..din {
                let zp = zi + pad[0];
                acc.iter_mut().for_each(|a| *a = 0.0);
                for o in 0..cout {
                    let w = &weights[(o * cin + i) * taps..(o * cin + i + 1) * taps];
                    for (dz, offs, first) in &back_groups {
                        if zp < *dz || zp - dz >= dout {
                            continue;
                        }
                        let ws = &w[*first..*first + offs.len()];
                        gather_taps(&mut acc, g_plane(n, o, zp - dz), offs, ws);
                    }
                }
                for y in 0..hin {
                    let src = y * wp + pad[2];
                    let row = &mut dst[(zi * hin + y) * win..(zi * hin + y + 1) * win];
                    for (d, a) in row.iter_mut().zip(&acc[src..src + win]) {
                        *d = S::narrow(*a);
                    }
                }
            }
        });

    Ok(ConvGrads {
        input: grad_in,
        weights: grad_w,
        bias,
    })
}

/// Plain (undilated) volumetric convolution evaluated voxel by voxel.
///
/// Independent of the padded fast path; kept as the reference for the
/// dilation-1 case and summed in the same order so results agree bitwise.
pub fn conv3d_basic<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Kernel<S>,
    padding: [usize; 3],
) -> Result<Tensor<S>> {
    check_input(input, kernel)?;
    let cfg = ConvConfig {
        dilation: 1,
        padding,
    };
    let out_dims = conv_output_dims(input.dims(), kernel.extent, &cfg)?;
    let in_dims = input.dims();
    let half = kernel.half_extent();
    let mut out = Tensor::zeros([
        input.batch(),
        kernel.out_channels,
        out_dims[0],
        out_dims[1],
        out_dims[2],
    ]);
    let at = |n: usize, i: usize, p: [isize; 3]| -> Option<f64> {
        if (0..3).any(|a| p[a] < 0 || p[a] >= in_dims[a] as isize) {
            return None;
        }
        let [z, y, x] = p.map(|v| v as usize);
        Some(input.plane(n, i)[(z * in_dims[1] + y) * in_dims[2] + x].widen())
    };
    for n in 0..input.batch() {
        for o in 0..kernel.out_channels {
            let mut values = Vec::with_capacity(out_dims.iter().product());
            for z in 0..out_dims[0] {
                for y in 0..out_dims[1] {
                    for x in 0..out_dims[2] {
                        let centre = [z, y, x]
                            .iter()
                            .enumerate()
                            .map(|(a, &p)| p as isize - padding[a] as isize + half[a])
                            .collect::<Vec<_>>();
                        let mut acc = 0.0f64;
                        for i in 0..kernel.in_channels {
                            for dz in -half[0]..=half[0] {
                                for dy in -half[1]..=half[1] {
                                    for dx in -half[2]..=half[2] {
                                        let p = [centre[0] - dz, centre[1] - dy, centre[2] - dx];
                                        if let Some(f) = at(n, i, p) {
                                            acc += kernel.at_offset(o, i, dz, dy, dx).widen() * f;
                                        }
                                    }
                                }
                            }
                        }
                        values.push(S::narrow(acc + kernel.bias[o].widen()));
                    }
                }
            }
            out.plane_mut(n, o).copy_from_slice(&values);
        }
    }
    Ok(out)
}

/// Single-volume convenience wrapper around [`conv3d_forward`].
pub fn conv3d_volume(input: &Volume, kernel: &Kernel<f32>, cfg: &ConvConfig) -> Result<Volume> {
    conv3d_forward(&Tensor::from_volume(input), kernel, cfg)?.to_volume(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(dims: Dims, v: f32) -> Tensor<f32> {
        Tensor::from_vec([1, 1, dims[0], dims[1], dims[2]], vec![v; dims.iter().product()])
            .unwrap()
    }

    #[test]
    fn identity_kernel() {
        let input = Tensor::<f32>::from_vec(
            [1, 1, 2, 3, 4],
            (0..24).map(|v| v as f32 * 0.5 - 3.0).collect(),
        )
        .unwrap();
        let k = Kernel::new(1, 1, [1, 1, 1], vec![1.0f32], vec![0.0]).unwrap();
        let out = conv3d_forward(&input, &k, &ConvConfig::new(1, 0)).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn box_kernel_counts_neighbours() {
        let input = constant([5, 5, 5], 1.0);
        let k = Kernel::new(1, 1, [3, 3, 3], vec![1.0f32; 27], vec![0.0]).unwrap();
        let out = conv3d_forward(&input, &k, &ConvConfig::new(1, 1)).unwrap();
        assert_eq!(out.dims(), [5, 5, 5]);
        let p = out.plane(0, 0);
        assert_eq!(p[(2 * 5 + 2) * 5 + 2], 27.0);
        assert_eq!(p[(1 * 5 + 1) * 5 + 1], 27.0);
        assert_eq!(p[0], 8.0);
        assert_eq!(p[124], 8.0);
        // Face centre sees 3 x 3 x 2.
        assert_eq!(p[(0 * 5 + 2) * 5 + 2], 18.0);
    }

    #[test]
    fn output_dims_formula() {
        assert_eq!(
            conv_output_dims([7, 7, 7], [3, 3, 3], &ConvConfig::new(2, 2)).unwrap(),
            [7, 7, 7]
        );
        assert_eq!(
            conv_output_dims([9, 8, 7], [3, 3, 3], &ConvConfig::new(3, 0)).unwrap(),
            [3, 2, 1]
        );
        assert!(matches!(
            conv_output_dims([6, 6, 6], [3, 3, 3], &ConvConfig::new(3, 0)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn rejects_channel_mismatch_and_even_kernels() {
        let input = constant([3, 3, 3], 1.0);
        let k = Kernel::<f32>::zeros(1, 2, [3, 3, 3]).unwrap();
        assert!(matches!(
            conv3d_forward(&input, &k, &ConvConfig::new(1, 1)),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(Kernel::<f32>::zeros(1, 1, [2, 3, 3]).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let input = Tensor::<f32>::from_vec([1, 2, 4, 4, 4], (0..128).map(|v| v as f32).collect())
            .unwrap();
        let k = Kernel::new(
            3,
            2,
            [3, 3, 3],
            (0..162).map(|v| v as f32 * 0.01).collect(),
            vec![0.5; 3],
        )
        .unwrap();
        let cfg = ConvConfig::new(1, 1);
        let g = conv3d_backward(&Tensor::zeros([1, 3, 4, 4, 4]), &input, &k, &cfg).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_voxel_chain_rule() {
        let input = Tensor::<f64>::from_vec([1, 1, 1, 1, 1], vec![3.0]).unwrap();
        let k = Kernel::new(1, 1, [1, 1, 1], vec![-2.0f64], vec![0.25]).unwrap();
        let cfg = ConvConfig::new(1, 0);
        let out = conv3d_forward(&input, &k, &cfg).unwrap();
        assert_eq!(out.data(), &[-5.75]);
        let g_out = Tensor::from_vec([1, 1, 1, 1, 1], vec![0.5]).unwrap();
        let g = conv3d_backward(&g_out, &input, &k, &cfg).unwrap();
        assert_eq!(g.weights, vec![0.5 * 3.0]);
        assert_eq!(g.input.data(), &[0.5 * -2.0]);
        assert_eq!(g.bias, vec![0.5]);
    }

    #[test]
    fn dilated_taps_are_spaced_by_dilation() {
        // A single non-zero tap at offset (0, 0, +1) with dilation 2 reads x - 2.
        let mut k = Kernel::<f32>::zeros(1, 1, [3, 3, 3]).unwrap();
        let idx = k.weight_index(0, 0, 1, 1, 2);
        k.weights[idx] = 1.0;
        let input =
            Tensor::from_vec([1, 1, 1, 1, 7], (1..=7).map(|v| v as f32).collect()).unwrap();
        let cfg = ConvConfig {
            dilation: 2,
            padding: [2, 2, 2],
        };
        let out = conv3d_forward(&input, &k, &cfg).unwrap();
        // Only the middle z/y plane survives: out dims are 1 x 1 x 7.
        assert_eq!(out.plane(0, 0), &[0., 0., 1., 2., 3., 4., 5.]);
    }
}
