use super::{Matrix, Scalar, Tensor4};
use crate::{Error, Result};

/// Mean per-pixel cross-entropy where the class axis is the channel axis of an
/// NCHW tensor. `targets` is indexed `(n, y, x)` in row-major order.
///
/// Returns the loss and its gradient with respect to `logits`.
pub fn softmax_cross_entropy_channels<T: Scalar>(
    logits: &Tensor4<T>,
    targets: &[usize],
) -> Result<(f64, Tensor4<T>)> {
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    if targets.len() != n * plane {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} targets for {} rows", targets.len(), n * plane),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::InvalidArgument(format!("target class {bad} out of range [0, {c})")));
    }
    let rows = (n * plane) as f64;
    let data = logits.data();
    let mut grad = Tensor4::zeros(logits.shape());
    let mut total = 0f64;
    let mut probs = vec![0f64; c];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let at = |ch: usize| base + ch * plane + p;
            let max = (0..c).map(|ch| data[at(ch)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0f64;
            for (ch, pr) in probs.iter_mut().enumerate() {
                *pr = (data[at(ch)].as_f64() - max).exp();
                z += *pr;
            }
            let t = targets[b * plane + p];
            total += z.ln() - (data[at(t)].as_f64() - max);
            let g = grad.data_mut();
            for (ch, pr) in probs.iter().enumerate() {
                let onehot = if ch == t { 1.0 } else { 0.0 };
                g[at(ch)] = T::from_f64((pr / z - onehot) / rows);
            }
        }
    }
    Ok((total / rows, grad))
}

/// Mean cross-entropy of `logits` rows against per-row class indices.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Matrix<T>, targets: &[usize]) -> Result<(f64, Matrix<T>)> {
    let t = logits.clone().into_tensor();
    let (loss, grad) = softmax_cross_entropy_channels(&t, targets)?;
    Ok((loss, Matrix::from_tensor(grad)))
}

/// Mean squared error over the selected elements (all when `mask` is `None`).
/// Unselected elements get exactly zero gradient.
pub fn mse_loss<T: Scalar>(pred: &Matrix<T>, target: &Matrix<T>, mask: Option<&[bool]>) -> Result<(f64, Matrix<T>)> {
    if pred.rows != target.rows || pred.cols != target.cols {
        return Err(Error::shape(
            "mse_loss",
            format!("{}x{} vs {}x{}", pred.rows, pred.cols, target.rows, target.cols),
        ));
    }
    if let Some(m) = mask {
        if m.len() != pred.data.len() {
            return Err(Error::shape("mse_loss", "selector length differs from prediction"));
        }
    }
    let selected = |i: usize| mask.is_none_or(|m| m[i]);
    let count = (0..pred.data.len()).filter(|&i| selected(i)).count();
    if count == 0 {
        return Err(Error::InvalidArgument("mse_loss: empty selection".into()));
    }
    let mut grad = Matrix::zeros(pred.rows, pred.cols);
    let mut total = 0f64;
    for i in 0..pred.data.len() {
        if selected(i) {
            let d = pred.data[i].as_f64() - target.data[i].as_f64();
            total += d * d;
            grad.data[i] = T::from_f64(2.0 * d / count as f64);
        }
    }
    Ok((total / count as f64, grad))
}
