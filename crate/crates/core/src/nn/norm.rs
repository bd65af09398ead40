use super::{Scalar, Tensor4};
use crate::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;

/// Batch statistics kept from the forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    /// Pre-affine normalized input.
    pub normalized: Tensor4<T>,
    pub inv_std: Vec<f64>,
    pub gain: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T> {
    pub input: Tensor4<T>,
    pub gain: Vec<T>,
    pub shift: Vec<T>,
}

/// Per-channel batch normalization using the statistics of the current batch
/// (population variance), followed by the affine `gain * x_hat + shift`.
pub fn batchnorm2d<T: Scalar>(
    input: &Tensor4<T>,
    gain: &[T],
    shift: &[T],
    epsilon: f64,
) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
    let [n, c, h, w] = input.shape();
    if gain.len() != c || shift.len() != c {
        return Err(Error::shape(
            "batchnorm2d",
            format!("{c} channels but gain/shift have {}/{}", gain.len(), shift.len()),
        ));
    }
    let plane = h * w;
    let count = n * plane;
    if count < 2 {
        return Err(Error::shape("batchnorm2d", format!("need >= 2 values per channel, got {count}")));
    }
    let data = input.data();
    let mut out = Tensor4::zeros(input.shape());
    let mut normalized = Tensor4::zeros(input.shape());
    let mut inv_std = vec![0f64; c];
    for ch in 0..c {
        let chunks = || (0..n).map(move |b| (b * c + ch) * plane);
        let mut sum = 0f64;
        for s in chunks() {
            sum += data[s..s + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / count as f64;
        let mut sq = 0f64;
        for s in chunks() {
            sq += data[s..s + plane].iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
        }
        let var = sq / count as f64;
        let istd = 1.0 / (var + epsilon).sqrt();
        inv_std[ch] = istd;
        let (g, sh) = (gain[ch].as_f64(), shift[ch].as_f64());
        for s in chunks() {
            for i in s..s + plane {
                let xh = (data[i].as_f64() - mean) * istd;
                normalized.data_mut()[i] = T::from_f64(xh);
                out.data_mut()[i] = T::from_f64(g * xh + sh);
            }
        }
    }
    Ok((out, BatchNormCache { normalized, inv_std, gain: gain.to_vec() }))
}

pub fn batchnorm2d_backward<T: Scalar>(
    grad_out: &Tensor4<T>,
    cache: &BatchNormCache<T>,
) -> Result<BatchNormGrads<T>> {
    if grad_out.shape() != cache.normalized.shape() {
        return Err(Error::shape(
            "batchnorm2d_backward",
            format!("{:?} vs {:?}", grad_out.shape(), cache.normalized.shape()),
        ));
    }
    let [n, c, h, w] = grad_out.shape();
    let plane = h * w;
    let m = (n * plane) as f64;
    let dy = grad_out.data();
    let xh = cache.normalized.data();
    let mut dx = Tensor4::zeros(grad_out.shape());
    let mut dgain = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for ch in 0..c {
        let starts: Vec<usize> = (0..n).map(|b| (b * c + ch) * plane).collect();
        let (mut sum_dy, mut sum_dy_xh) = (0f64, 0f64);
        for &s in &starts {
            for i in s..s + plane {
                let d = dy[i].as_f64();
                sum_dy += d;
                sum_dy_xh += d * xh[i].as_f64();
            }
        }
        dgain[ch] = T::from_f64(sum_dy_xh);
        dshift[ch] = T::from_f64(sum_dy);
        let scale = cache.gain[ch].as_f64() * cache.inv_std[ch] / m;
        for &s in &starts {
            for i in s..s + plane {
                let v = scale * (m * dy[i].as_f64() - sum_dy - xh[i].as_f64() * sum_dy_xh);
                dx.data_mut()[i] = T::from_f64(v);
            }
        }
    }
    Ok(BatchNormGrads { input: dx, gain: dgain, shift: dshift })
}
