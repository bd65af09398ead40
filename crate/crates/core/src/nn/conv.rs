use super::{Scalar, Tensor4};
use crate::{Error, Result};

/// Output pixels handled per im2col block; bounds the scratch buffer to
/// `in_channels * k * k * BAND_PIXELS` values regardless of image size.
const BAND_PIXELS: usize = 4096;

/// Output extent of a convolution along one axis, `None` when non-positive.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    pub input: Tensor4<T>,
    pub weights: Tensor4<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weights: Tensor4<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn new<T: Scalar>(input: &Tensor4<T>, weights: &Tensor4<T>, stride: usize, padding: usize) -> Result<Self> {
        let [_, cin, h, w] = input.shape();
        let [_, wcin, kh, kw] = weights.shape();
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, weights expect {wcin}"),
            ));
        }
        let oh = conv_output_extent(h, kh, stride, padding);
        let ow = conv_output_extent(w, kw, stride, padding);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => {
                Ok(Self { cin, h, w, kh, kw, oh, ow, stride, padding })
            }
            _ => Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} stride {stride} padding {padding} does not fit input {h}x{w}"
                ),
            )),
        }
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn band_rows(&self) -> usize {
        (BAND_PIXELS / self.ow).clamp(1, self.oh)
    }

    /// Range of output columns whose input column `ox * stride + kx - padding` is in bounds.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.padding { 0 } else { (self.padding - kx).div_ceil(self.stride) };
        let hi_incl = (self.w - 1 + self.padding) as isize - kx as isize;
        if hi_incl < 0 {
            return (0, 0);
        }
        let hi = ((hi_incl as usize) / self.stride + 1).min(self.ow);
        (lo.min(hi), hi)
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// Fill `col` (K x band_px) with the receptive fields of output rows `oy0..oy1`.
fn im2col<T: Scalar>(g: &Geometry, image: &[T], oy0: usize, oy1: usize, col: &mut [T]) {
    let bp = (oy1 - oy0) * g.ow;
    for ci in 0..g.cin {
        let plane = &image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &mut col[r * bp..(r + 1) * bp];
                let (lo, hi) = g.valid_ox(kx);
                for (bi, oy) in (oy0..oy1).enumerate() {
                    let dst = &mut row[bi * g.ow..(bi + 1) * g.ow];
                    match g.input_row(oy, ky) {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            dst[..lo].fill(T::zero());
                            dst[hi..].fill(T::zero());
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for ox in lo..hi {
                                dst[ox] = src[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column block back onto the input gradient image.
fn col2im<T: Scalar>(g: &Geometry, col: &[T], oy0: usize, oy1: usize, image: &mut [T]) {
    let bp = (oy1 - oy0) * g.ow;
    for ci in 0..g.cin {
        let plane = &mut image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &col[r * bp..(r + 1) * bp];
                let (lo, hi) = g.valid_ox(kx);
                for (bi, oy) in (oy0..oy1).enumerate() {
                    if let Some(iy) = g.input_row(oy, ky) {
                        let src = &row[bi * g.ow..(bi + 1) * g.ow];
                        let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                        for ox in lo..hi {
                            dst[ox * g.stride + kx - g.padding] =
                                dst[ox * g.stride + kx - g.padding] + src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution (cross-correlation) of an NCHW batch with `cout x cin x kh x kw` weights.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor4<T>,
    weights: &Tensor4<T>,
    bias: &[T],
    stride: usize,
    padding: usize,
) -> Result<Tensor4<T>> {
    let g = Geometry::new(input, weights, stride, padding)?;
    let [batch, ..] = input.shape();
    let cout = weights.shape()[0];
    if bias.len() != cout {
        return Err(Error::shape("conv2d", format!("bias has {} entries for {cout} filters", bias.len())));
    }
    let k = g.k();
    let out_plane = g.oh * g.ow;
    let mut out = Tensor4::zeros([batch, cout, g.oh, g.ow]);
    let in_len = g.cin * g.h * g.w;
    let band = g.band_rows();
    let mut col = vec![T::zero(); k * band * g.ow];
    for n in 0..batch {
        let image = &input.data()[n * in_len..(n + 1) * in_len];
        let dst = &mut out.data_mut()[n * cout * out_plane..(n + 1) * cout * out_plane];
        let mut oy0 = 0;
        while oy0 < g.oh {
            let oy1 = (oy0 + band).min(g.oh);
            let bp = (oy1 - oy0) * g.ow;
            im2col(&g, image, oy0, oy1, &mut col[..k * bp]);
            T::gemm(
                cout,
                k,
                bp,
                T::one(),
                weights.data(),
                (k, 1),
                &col[..k * bp],
                (bp, 1),
                T::zero(),
                &mut dst[oy0 * g.ow..],
                (out_plane, 1),
            );
            oy0 = oy1;
        }
        for (co, &b) in bias.iter().enumerate() {
            for v in &mut dst[co * out_plane..(co + 1) * out_plane] {
                *v = *v + b;
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input, weights and bias.
pub fn conv2d_backward<T: Scalar>(grad_out: &Tensor4<T>, cache: &ConvCache<T>) -> Result<ConvGrads<T>> {
    let g = Geometry::new(&cache.input, &cache.weights, cache.stride, cache.padding)?;
    let [batch, ..] = cache.input.shape();
    let cout = cache.weights.shape()[0];
    if grad_out.shape() != [batch, cout, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out {:?} != forward output {:?}", grad_out.shape(), [batch, cout, g.oh, g.ow]),
        ));
    }
    let k = g.k();
    let out_plane = g.oh * g.ow;
    let in_len = g.cin * g.h * g.w;
    let band = g.band_rows();
    let mut grad_in = Tensor4::zeros(cache.input.shape());
    let mut grad_w = Tensor4::zeros(cache.weights.shape());
    let mut grad_b = vec![0f64; cout];
    let mut col = vec![T::zero(); k * band * g.ow];
    let mut dcol = vec![T::zero(); k * band * g.ow];
    for n in 0..batch {
        let image = &cache.input.data()[n * in_len..(n + 1) * in_len];
        let dy = &grad_out.data()[n * cout * out_plane..(n + 1) * cout * out_plane];
        for (co, acc) in grad_b.iter_mut().enumerate() {
            *acc += dy[co * out_plane..(co + 1) * out_plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let dx = &mut grad_in.data_mut()[n * in_len..(n + 1) * in_len];
        let mut oy0 = 0;
        while oy0 < g.oh {
            let oy1 = (oy0 + band).min(g.oh);
            let bp = (oy1 - oy0) * g.ow;
            let dy_band = &dy[oy0 * g.ow..];
            im2col(&g, image, oy0, oy1, &mut col[..k * bp]);
            // dW += dY_band . col^T
            T::gemm(
                cout,
                bp,
                k,
                T::one(),
                dy_band,
                (out_plane, 1),
                &col[..k * bp],
                (1, bp),
                T::one(),
                grad_w.data_mut(),
                (k, 1),
            );
            // dcol = W^T . dY_band
            T::gemm(
                k,
                cout,
                bp,
                T::one(),
                cache.weights.data(),
                (1, k),
                dy_band,
                (out_plane, 1),
                T::zero(),
                &mut dcol[..k * bp],
                (bp, 1),
            );
            col2im(&g, &dcol[..k * bp], oy0, oy1, dx);
            oy0 = oy1;
        }
    }
    Ok(ConvGrads {
        input: grad_in,
        weights: grad_w,
        bias: grad_b.into_iter().map(T::from_f64).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    /// Direct sliding-window evaluation, independent of im2col/gemm.
    fn conv_oracle(x: &Tensor4<f64>, w: &Tensor4<f64>, b: &[f64], s: usize, p: usize) -> Tensor4<f64> {
        let [n, cin, h, wd] = x.shape();
        let [cout, _, kh, kw] = w.shape();
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        let mut out = Tensor4::zeros([n, cout, oh, ow]);
        for bi in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at(bi, ci, iy as usize, ix as usize) * w.at(co, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        let o = out.offset(bi, co, oy, ox);
                        out.data_mut()[o] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor4::from_vec([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let mut k = Tensor4::zeros([1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv2d_forward(&x, &k, &[0.0], 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = rng_from_seed(3);
        let x = Tensor4::<f32>::zeros([2, 3, 5, 4]);
        let w = Tensor4::randn([4, 3, 3, 3], 1.0, &mut rng);
        let bias = [0.5, -1.0, 2.0, 0.0];
        let y = conv2d_forward(&x, &w, &bias, 1, 1).unwrap();
        for n in 0..2 {
            for (c, &b) in bias.iter().enumerate() {
                for yy in 0..5 {
                    for xx in 0..4 {
                        assert_eq!(y.at(n, c, yy, xx), b);
                    }
                }
            }
        }
    }

    #[test]
    fn strided_conv_matches_sliding_window_oracle() {
        let mut rng = rng_from_seed(11);
        let x = Tensor4::<f64>::randn([1, 2, 5, 5], 1.0, &mut rng);
        let w = Tensor4::<f64>::randn([3, 2, 3, 3], 1.0, &mut rng);
        let b = [0.1, -0.2, 0.3];
        let y = conv2d_forward(&x, &w, &b, 2, 1).unwrap();
        let expected = conv_oracle(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), [1, 3, 3, 3]);
        for (a, e) in y.data().iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn banded_path_matches_oracle_on_wide_input() {
        // Wide enough that the output spans several im2col bands.
        let mut rng = rng_from_seed(5);
        let x = Tensor4::<f64>::randn([2, 2, 40, 150], 1.0, &mut rng);
        let w = Tensor4::<f64>::randn([3, 2, 3, 3], 1.0, &mut rng);
        let b = [0.0, 1.0, -1.0];
        let y = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        let expected = conv_oracle(&x, &w, &b, 1, 1);
        for (a, e) in y.data().iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn output_extent_arithmetic() {
        assert_eq!(conv_output_extent(240, 3, 2, 1), Some(120));
        assert_eq!(conv_output_extent(15, 3, 2, 1), Some(8));
        assert_eq!(conv_output_extent(240, 3, 1, 1), Some(240));
        assert_eq!(conv_output_extent(1, 3, 1, 0), None);
    }

    #[test]
    fn rejects_channel_mismatch_and_oversized_kernel() {
        let x = Tensor4::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor4::<f32>::zeros([1, 3, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &w, &[0.0], 1, 1), Err(Error::Shape { .. })));
        let w = Tensor4::<f32>::zeros([1, 2, 5, 5]);
        assert!(matches!(conv2d_forward(&x, &w, &[0.0], 1, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn sum_loss_bias_gradient_counts_positions() {
        let x = Tensor4::<f64>::zeros([2, 1, 6, 6]);
        let w = Tensor4::<f64>::zeros([2, 1, 3, 3]);
        let out = conv2d_forward(&x, &w, &[0.0, 0.0], 2, 1).unwrap();
        let grad_out = Tensor4::filled(out.shape(), 1.0);
        let cache = ConvCache { input: x, weights: w, stride: 2, padding: 1 };
        let g = conv2d_backward(&grad_out, &cache).unwrap();
        // 2 images x 3x3 outputs
        assert_eq!(g.bias, vec![18.0, 18.0]);
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let mut rng = rng_from_seed(2);
        let x = Tensor4::<f64>::randn([1, 2, 4, 4], 1.0, &mut rng);
        let w = Tensor4::<f64>::randn([3, 2, 3, 3], 1.0, &mut rng);
        let cache = ConvCache { input: x, weights: w, stride: 1, padding: 1 };
        let g = conv2d_backward(&Tensor4::zeros([1, 3, 4, 4]), &cache).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(7);
        let x = Tensor4::<f64>::randn([1, 1, 4, 4], 1.0, &mut rng);
        let w = Tensor4::<f64>::randn([2, 1, 3, 3], 1.0, &mut rng);
        let r = Tensor4::<f64>::randn([1, 2, 4, 4], 1.0, &mut rng);
        // loss = <r, conv(x, w)>
        let loss = |w: &Tensor4<f64>| -> f64 {
            let y = conv2d_forward(&x, w, &[0.0, 0.0], 1, 1).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let cache = ConvCache { input: x.clone(), weights: w.clone(), stride: 1, padding: 1 };
        let g = conv2d_backward(&r, &cache).unwrap();
        let h = 1e-4;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[i] += h;
            let mut wm = w.clone();
            wm.data_mut()[i] -= h;
            let numeric = (loss(&wp) - loss(&wm)) / (2.0 * h);
            let analytic = g.weights.data()[i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(rel < 1e-3, "param {i}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn grad_out_shape_is_checked() {
        let cache = ConvCache {
            input: Tensor4::<f32>::zeros([1, 1, 4, 4]),
            weights: Tensor4::zeros([1, 1, 3, 3]),
            stride: 1,
            padding: 1,
        };
        assert!(conv2d_backward(&Tensor4::zeros([1, 1, 3, 3]), &cache).is_err());
    }
}
