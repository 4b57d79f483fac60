use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::parallel_enabled;
use crate::rng::DetRng;
use crate::{Element, Error, Result, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with padding equal to the dilation, which keeps a 3x3 map size.
    pub const fn same3x3(dilation: usize) -> Self {
        ConvGeometry::new(1, dilation, dilation)
    }

    pub const fn pointwise() -> Self {
        ConvGeometry::new(1, 0, 1)
    }

    pub fn extent(&self, k: usize) -> usize {
        effective_extent(k, self.dilation)
    }

    pub fn output_len(&self, input: usize, k: usize, op: &'static str) -> Result<usize> {
        let extent = self.extent(k);
        let padded = input + 2 * self.padding;
        if padded < extent || self.stride == 0 {
            return Err(Error::NegativeOutputSize {
                op,
                input,
                extent,
                padding: self.padding,
            });
        }
        Ok((padded - extent) / self.stride + 1)
    }
}

/// `k + (k - 1)(d - 1)`: the span covered by a dilated kernel.
pub fn effective_extent(k: usize, dilation: usize) -> usize {
    k + (k - 1) * (dilation.max(1) - 1)
}

/// Weights `(out, in, kh, kw)`, bias `(1, out, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub geometry: ConvGeometry,
}

impl<T: Element> ConvParams<T> {
    pub fn zeros(in_c: usize, out_c: usize, k: usize, geometry: ConvGeometry) -> Self {
        ConvParams {
            weight: Tensor::zeros((out_c, in_c, k, k)),
            bias: Tensor::zeros((1, out_c, 1, 1)),
            geometry,
        }
    }

    /// He-uniform weights, zero bias.
    pub fn init(
        rng: &mut DetRng,
        in_c: usize,
        out_c: usize,
        k: usize,
        geometry: ConvGeometry,
    ) -> Self {
        let fan_in = (in_c * k * k).max(1) as f64;
        let bound = (6.0 / fan_in).sqrt();
        ConvParams {
            weight: crate::rng::uniform_tensor(rng, (out_c, in_c, k, k), -bound, bound),
            bias: Tensor::zeros((1, out_c, 1, 1)),
            geometry,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().channels
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().batch
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().height
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.channels != self.in_channels() {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                expected: self.in_channels(),
                actual: input.channels,
            });
        }
        let ws = self.weight.shape();
        let oh = self.geometry.output_len(input.height, ws.height, "conv2d")?;
        let ow = self.geometry.output_len(input.width, ws.width, "conv2d")?;
        Ok(Shape::new(input.batch, self.out_channels(), oh, ow))
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T: Element = f32> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Output positions `o` in `0..out_len` whose tap `o*stride - pad + offset`
/// lands inside `0..in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, offset: usize) -> (usize, usize) {
    // o*stride + offset >= pad  and  o*stride + offset - pad < in_len
    let lo = if offset >= pad {
        0
    } else {
        (pad - offset).div_ceil(stride)
    };
    let limit = in_len + pad; // o*stride + offset < limit
    let hi = if limit <= offset {
        0
    } else {
        ((limit - offset).div_ceil(stride)).min(out_len)
    };
    (lo, hi.max(lo))
}

/// Unfolds output rows `oy_lo..oy_hi` of image `n` into rows ordered
/// `(in_channel, ky, kx)`, one column per output pixel. Taps that fall into
/// padding stay zero.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &Tensor<T>,
    n: usize,
    k_h: usize,
    k_w: usize,
    g: ConvGeometry,
    os: Shape,
    oy_lo: usize,
    oy_hi: usize,
) -> Vec<f64> {
    let xs = x.shape();
    let len = (oy_hi - oy_lo) * os.width;
    let mut cols = vec![0.0f64; xs.channels * k_h * k_w * len];
    let xd = x.data();
    for ic in 0..xs.channels {
        let xplane = &xd[(n * xs.channels + ic) * xs.plane()..][..xs.plane()];
        for ky in 0..k_h {
            let (oy0, oy1) = valid_range(os.height, xs.height, g.stride, g.padding, ky * g.dilation);
            let (oy0, oy1) = (oy0.max(oy_lo), oy1.min(oy_hi));
            for kx in 0..k_w {
                let (ox0, ox1) = valid_range(os.width, xs.width, g.stride, g.padding, kx * g.dilation);
                let j = (ic * k_h + ky) * k_w + kx;
                let row = &mut cols[j * len..][..len];
                if ox0 >= ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky * g.dilation - g.padding;
                    let xrow = &xplane[iy * xs.width..][..xs.width];
                    let dst = &mut row[(oy - oy_lo) * os.width..][ox0..ox1];
                    let ix0 = ox0 * g.stride + kx * g.dilation - g.padding;
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d = xrow[ix0 + i * g.stride].to_f64();
                    }
                }
            }
        }
    }
    cols
}

/// Output-row tiles of roughly `TILE_PIXELS` pixels so unfolded columns stay
/// cache sized.
const TILE_PIXELS: usize = 256;

fn row_tiles(os: Shape) -> impl Iterator<Item = (usize, usize)> {
    let rows = (TILE_PIXELS / os.width.max(1)).max(1);
    (0..os.height).step_by(rows).map(move |lo| (lo, (lo + rows).min(os.height)))
}

/// `acc += sum_j w[j] * rows[j]`, adding the terms in `j` order. Four rows go
/// per pass so `acc` is loaded and stored less often.
fn accumulate_rows(acc: &mut [f64], w: &[f64], rows: &[f64], len: usize) {
    let mut j = 0;
    while j + 4 <= w.len() {
        let (w0, w1, w2, w3) = (w[j], w[j + 1], w[j + 2], w[j + 3]);
        let r0 = &rows[j * len..][..len];
        let r1 = &rows[(j + 1) * len..][..len];
        let r2 = &rows[(j + 2) * len..][..len];
        let r3 = &rows[(j + 3) * len..][..len];
        for p in 0..len {
            let mut a = acc[p];
            a += w0 * r0[p];
            a += w1 * r1[p];
            a += w2 * r2[p];
            a += w3 * r3[p];
            acc[p] = a;
        }
        j += 4;
    }
    for (jj, &wv) in w.iter().enumerate().skip(j) {
        for (a, &c) in acc.iter_mut().zip(&rows[jj * len..][..len]) {
            *a += wv * c;
        }
    }
}

fn for_each_chunk<T: Element>(data: &mut [T], size: usize, task: impl Fn(usize, &mut [T]) + Sync) {
    if parallel_enabled() {
        data.par_chunks_mut(size).enumerate().for_each(|(i, d)| task(i, d));
    } else {
        data.chunks_mut(size).enumerate().for_each(|(i, d)| task(i, d));
    }
}

/// Dilated 2-D convolution.
///
/// Each output accumulates `w * x` over `(in_channel, ky, kx)` in that order in
/// `f64`, then adds the bias. Taps that fall into padding contribute zero.
pub fn conv2d_forward<T: Element>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let os = p.output_shape(x.shape())?;
    let ws = p.weight.shape();
    let (k_h, k_w) = (ws.height, ws.width);
    let mut out = Tensor::zeros(os);
    let oplane = os.plane();
    if out.is_empty() {
        return Ok(out);
    }
    let kdim = ws.channels * k_h * k_w;
    let wd: Vec<f64> = p.weight.data().iter().map(|w| w.to_f64()).collect();
    let bd = p.bias.data();

    for_each_chunk(out.data_mut(), os.channels * oplane, |n, dst| {
        for (lo, hi) in row_tiles(os) {
            let cols = im2col(x, n, k_h, k_w, p.geometry, os, lo, hi);
            let len = (hi - lo) * os.width;
            let mut acc = vec![0.0f64; len];
            for oc in 0..os.channels {
                acc.fill(0.0);
                accumulate_rows(&mut acc, &wd[oc * kdim..][..kdim], &cols, len);
                let b = bd[oc].to_f64();
                for (d, a) in dst[oc * oplane + lo * os.width..][..len].iter_mut().zip(&acc) {
                    *d = T::from_f64(a + b);
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let os = p.output_shape(x.shape())?;
    if grad_out.shape() != os {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            expected: os.dims(),
            actual: grad_out.shape().dims(),
        });
    }
    let xs = x.shape();
    let ws = p.weight.shape();
    let (k_h, k_w) = (ws.height, ws.width);
    let kk = k_h * k_w;
    let kdim = ws.channels * kk;
    let g = p.geometry;
    let wd = p.weight.data();
    let oplane = os.plane();
    let iplane = xs.plane();
    let gd: Vec<f64> = grad_out.data().iter().map(|v| v.to_f64()).collect();

    // bias: per-channel sum of grad_out
    let mut grad_b = Tensor::zeros(p.bias.shape());
    for oc in 0..os.channels {
        let mut acc = 0.0f64;
        for n in 0..os.batch {
            acc += gd[(n * os.channels + oc) * oplane..][..oplane].iter().sum::<f64>();
        }
        grad_b.data_mut()[oc] = T::from_f64(acc);
    }

    let mut grad_w = Tensor::zeros(ws);
    let mut grad_x = Tensor::zeros(xs);
    if oplane == 0 || os.batch == 0 {
        return Ok(ConvGrads {
            x: grad_x,
            weight: grad_w,
            bias: grad_b,
        });
    }

    // weight: each oc row sums grad * tap over (n, pixel) in order; tiles go
    // pixel-major so a whole row accumulates at once
    if kdim > 0 && !grad_w.is_empty() {
        let mut acc_w = vec![0.0f64; os.channels * kdim];
        for n in 0..os.batch {
            for (lo, hi) in row_tiles(os) {
                let cols = im2col(x, n, k_h, k_w, g, os, lo, hi);
                let len = (hi - lo) * os.width;
                let mut taps_t = vec![0.0f64; cols.len()];
                for j in 0..kdim {
                    for (pix, &v) in cols[j * len..][..len].iter().enumerate() {
                        taps_t[pix * kdim + j] = v;
                    }
                }
                for_each_chunk(&mut acc_w, kdim, |oc, acc| {
                    let gtile = &gd[(n * os.channels + oc) * oplane + lo * os.width..][..len];
                    accumulate_rows(acc, gtile, &taps_t, kdim);
                });
            }
        }
        for (d, a) in grad_w.data_mut().iter_mut().zip(&acc_w) {
            *d = T::from_f64(*a);
        }
    }

    // input: one (n, ic) plane per task; fold kernel-tap rows back onto the plane
    if iplane > 0 && !grad_x.is_empty() {
        for_each_chunk(grad_x.data_mut(), iplane, |idx, dst| {
            let n = idx / xs.channels;
            let ic = idx % xs.channels;
            let mut taps = vec![0.0f64; kk * oplane];
            let gimg = &gd[n * os.channels * oplane..][..os.channels * oplane];
            for t in 0..kk {
                let wcol: Vec<f64> = (0..os.channels).map(|oc| wd[oc * kdim + ic * kk + t].to_f64()).collect();
                accumulate_rows(&mut taps[t * oplane..][..oplane], &wcol, gimg, oplane);
            }
            let mut acc = vec![0.0f64; iplane];
            for ky in 0..k_h {
                let (oy0, oy1) = valid_range(os.height, xs.height, g.stride, g.padding, ky * g.dilation);
                for kx in 0..k_w {
                    let (ox0, ox1) = valid_range(os.width, xs.width, g.stride, g.padding, kx * g.dilation);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let row = &taps[(ky * k_w + kx) * oplane..][..oplane];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky * g.dilation - g.padding;
                        let arow = &mut acc[iy * xs.width..][..xs.width];
                        let ix0 = ox0 * g.stride + kx * g.dilation - g.padding;
                        for (i, &v) in row[oy * os.width..][ox0..ox1].iter().enumerate() {
                            arow[ix0 + i * g.stride] += v;
                        }
                    }
                }
            }
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = T::from_f64(*a);
            }
        });
    }

    Ok(ConvGrads {
        x: grad_x,
        weight: grad_w,
        bias: grad_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded_rng, uniform_tensor};
    use proptest::prelude::*;

    /// Plain six-deep loop nest, same accumulation order as the kernel.
    fn naive_conv(x: &Tensor<f32>, p: &ConvParams<f32>) -> Tensor<f32> {
        let xs = x.shape();
        let ws = p.weight.shape();
        let g = p.geometry;
        let ext_h = g.extent(ws.height);
        let ext_w = g.extent(ws.width);
        let oh = (xs.height + 2 * g.padding - ext_h) / g.stride + 1;
        let ow = (xs.width + 2 * g.padding - ext_w) / g.stride + 1;
        let mut out = Tensor::zeros((xs.batch, ws.batch, oh, ow));
        for n in 0..xs.batch {
            for oc in 0..ws.batch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for ic in 0..xs.channels {
                            for ky in 0..ws.height {
                                for kx in 0..ws.width {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize
                                        - g.padding as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize
                                        - g.padding as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= xs.height as isize
                                        || ix >= xs.width as isize
                                    {
                                        continue;
                                    }
                                    acc += p.weight.at(oc, ic, ky, kx) as f64
                                        * x.at(n, ic, iy as usize, ix as usize) as f64;
                                }
                            }
                        }
                        let i = out.index(n, oc, oy, ox);
                        out.data_mut()[i] = (acc + p.bias.data()[oc] as f64) as f32;
                    }
                }
            }
        }
        out
    }

    /// Places the taps of a dilated kernel on a dense `(k-1)d+1` grid.
    fn zero_inserted(p: &ConvParams<f32>) -> ConvParams<f32> {
        let ws = p.weight.shape();
        let d = p.geometry.dilation;
        let e = (ws.height - 1) * d + 1;
        let mut w = Tensor::zeros((ws.batch, ws.channels, e, e));
        for o in 0..ws.batch {
            for i in 0..ws.channels {
                for ky in 0..ws.height {
                    for kx in 0..ws.width {
                        let idx = w.index(o, i, ky * d, kx * d);
                        w.data_mut()[idx] = p.weight.at(o, i, ky, kx);
                    }
                }
            }
        }
        ConvParams {
            weight: w,
            bias: p.bias.clone(),
            geometry: ConvGeometry::new(p.geometry.stride, p.geometry.padding, 1),
        }
    }

    fn random_params(rng: &mut DetRng, ic: usize, oc: usize, k: usize, g: ConvGeometry) -> ConvParams<f32> {
        ConvParams {
            weight: uniform_tensor(rng, (oc, ic, k, k), -1.0, 1.0),
            bias: uniform_tensor(rng, (1, oc, 1, 1), -1.0, 1.0),
            geometry: g,
        }
    }

    #[test]
    fn dilation_six_extent() {
        assert_eq!(effective_extent(3, 6), 13);
        assert_eq!(effective_extent(3, 1), 3);
        assert_eq!(effective_extent(1, 9), 1);
    }

    #[test]
    fn center_tap_is_identity_for_any_dilation() {
        let mut rng = seeded_rng(1);
        let x: Tensor<f32> = uniform_tensor(&mut rng, (2, 3, 9, 7), -2.0, 2.0);
        for d in 1..=6 {
            let mut p = ConvParams::zeros(3, 3, 3, ConvGeometry::same3x3(d));
            for c in 0..3 {
                let i = p.weight.index(c, c, 1, 1);
                p.weight.data_mut()[i] = 1.0;
            }
            let y = conv2d_forward(&x, &p).unwrap();
            assert_eq!(y.data(), x.data(), "dilation {d}");
        }
    }

    #[test]
    fn dilated_matches_zero_inserted_kernel() {
        let mut rng = seeded_rng(11);
        for d in 1..=6 {
            let x = uniform_tensor(&mut rng, (2, 3, 14, 11), -1.0, 1.0);
            let p = random_params(&mut rng, 3, 4, 3, ConvGeometry::new(1, d, d));
            let y = conv2d_forward(&x, &p).unwrap();
            let oracle = naive_conv(&x, &zero_inserted(&p));
            assert!(y.max_abs_diff(&oracle) < 1e-6, "dilation {d}");
        }
    }

    #[test]
    fn dilation_one_is_bit_identical_to_loop_nest() {
        let mut rng = seeded_rng(5);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0), (3, 2)] {
            let x = uniform_tensor(&mut rng, (2, 4, 11, 13), -1.0, 1.0);
            let p = random_params(&mut rng, 4, 5, 3, ConvGeometry::new(stride, pad, 1));
            let y = conv2d_forward(&x, &p).unwrap();
            let r = naive_conv(&x, &p);
            assert_eq!(y.shape(), r.shape());
            assert_eq!(y.data(), r.data(), "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::<f32>::zeros((1, 2, 5, 5));
        let p = ConvParams::<f32>::zeros(3, 1, 3, ConvGeometry::same3x3(1));
        assert!(matches!(
            conv2d_forward(&x, &p),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn negative_output_rejected() {
        let x = Tensor::<f32>::zeros((1, 1, 4, 4));
        let p = ConvParams::<f32>::zeros(1, 1, 3, ConvGeometry::new(1, 0, 3));
        assert!(matches!(
            conv2d_forward(&x, &p),
            Err(Error::NegativeOutputSize { .. })
        ));
    }

    #[test]
    fn empty_batch_passes_through() {
        let x = Tensor::<f32>::zeros((0, 2, 5, 5));
        let p = ConvParams::<f32>::zeros(2, 3, 3, ConvGeometry::same3x3(2));
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(0, 3, 5, 5));
        let g = conv2d_backward(&x, &p, &y).unwrap();
        assert!(g.x.is_empty());
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_grad_is_channel_sum() {
        let mut rng = seeded_rng(2);
        let x = uniform_tensor(&mut rng, (2, 2, 6, 6), -1.0, 1.0);
        let p = random_params(&mut rng, 2, 3, 3, ConvGeometry::same3x3(2));
        let go: Tensor<f32> = uniform_tensor(&mut rng, (2, 3, 6, 6), -1.0, 1.0);
        let g = conv2d_backward(&x, &p, &go).unwrap();
        for oc in 0..3 {
            let s: f64 = (0..2)
                .flat_map(|n| go.plane(n, oc).iter().map(|&v| v as f64))
                .sum();
            assert!((g.bias.data()[oc] as f64 - s).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = seeded_rng(3);
        let x = uniform_tensor(&mut rng, (1, 2, 5, 5), -1.0, 1.0);
        let p = random_params(&mut rng, 2, 2, 3, ConvGeometry::same3x3(2));
        let g = conv2d_backward(&x, &p, &Tensor::zeros((1, 2, 5, 5))).unwrap();
        assert!(g.x.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_out_shape_checked() {
        let x = Tensor::<f32>::zeros((1, 2, 5, 5));
        let p = ConvParams::<f32>::zeros(2, 2, 3, ConvGeometry::same3x3(1));
        assert!(conv2d_backward(&x, &p, &Tensor::zeros((1, 2, 4, 5))).is_err());
    }

    #[test]
    fn parallel_matches_sequential() {
        let mut rng = seeded_rng(9);
        let x = uniform_tensor(&mut rng, (2, 3, 10, 10), -1.0, 1.0);
        let p = random_params(&mut rng, 3, 4, 3, ConvGeometry::same3x3(2));
        let go = uniform_tensor(&mut rng, (2, 4, 10, 10), -1.0, 1.0);
        let seq = conv2d_forward(&x, &p).unwrap();
        let gseq = conv2d_backward(&x, &p, &go).unwrap();
        let _guard = super::super::ParallelGuard::enable();
        let par = conv2d_forward(&x, &p).unwrap();
        let gpar = conv2d_backward(&x, &p, &go).unwrap();
        assert_eq!(seq.data(), par.data());
        assert_eq!(gseq.x.data(), gpar.x.data());
        assert_eq!(gseq.weight.data(), gpar.weight.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn conv_is_linear_without_bias(seed in any::<u64>(), alpha in -3.0f32..3.0, d in 1usize..4) {
            let mut rng = seeded_rng(seed);
            let x: Tensor<f32> = uniform_tensor(&mut rng, (1, 2, 7, 7), -1.0, 1.0);
            let mut p = random_params(&mut rng, 2, 3, 3, ConvGeometry::same3x3(d));
            p.bias = Tensor::zeros((1, 3, 1, 1));
            let y = conv2d_forward(&x, &p).unwrap();
            let ys = conv2d_forward(&x.map(|v| v * alpha), &p).unwrap();
            for (a, b) in y.data().iter().zip(ys.data()) {
                prop_assert!((a * alpha - b).abs() <= 1e-5 * (1.0 + b.abs()));
            }
        }
    }
}
