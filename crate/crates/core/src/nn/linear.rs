use super::{Matrix, Scalar};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct LinearGrads<T> {
    pub input: Matrix<T>,
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

/// `input (N x in) . weights (in x out) + bias`.
pub fn linear_forward<T: Scalar>(input: &Matrix<T>, weights: &Matrix<T>, bias: &[T]) -> Result<Matrix<T>> {
    if input.cols != weights.rows || bias.len() != weights.cols {
        return Err(Error::shape(
            "linear",
            format!(
                "input {}x{}, weights {}x{}, bias {}",
                input.rows,
                input.cols,
                weights.rows,
                weights.cols,
                bias.len()
            ),
        ));
    }
    let mut out = Matrix::zeros(input.rows, weights.cols);
    for r in 0..input.rows {
        out.data[r * weights.cols..(r + 1) * weights.cols].copy_from_slice(bias);
    }
    T::gemm(
        input.rows,
        input.cols,
        weights.cols,
        T::one(),
        &input.data,
        (input.cols, 1),
        &weights.data,
        (weights.cols, 1),
        T::one(),
        &mut out.data,
        (weights.cols, 1),
    );
    Ok(out)
}

pub fn linear_backward<T: Scalar>(
    grad_out: &Matrix<T>,
    input: &Matrix<T>,
    weights: &Matrix<T>,
) -> Result<LinearGrads<T>> {
    if grad_out.rows != input.rows || grad_out.cols != weights.cols || input.cols != weights.rows {
        return Err(Error::shape("linear_backward", "grad_out does not match forward shapes"));
    }
    let (n, fin, fout) = (input.rows, input.cols, weights.cols);
    let mut gi = Matrix::zeros(n, fin);
    T::gemm(n, fout, fin, T::one(), &grad_out.data, (fout, 1), &weights.data, (1, fout), T::zero(), &mut gi.data, (fin, 1));
    let mut gw = Matrix::zeros(fin, fout);
    T::gemm(fin, n, fout, T::one(), &input.data, (1, fin), &grad_out.data, (fout, 1), T::zero(), &mut gw.data, (fout, 1));
    let bias = (0..fout)
        .map(|c| T::from_f64((0..n).map(|r| grad_out.get(r, c).as_f64()).sum()))
        .collect();
    Ok(LinearGrads { input: gi, weights: gw, bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;
    use rand::Rng;

    #[test]
    fn identity_weights_pass_input_through() {
        let x = Matrix::from_rows(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, 4.0]]).unwrap();
        let mut eye = Matrix::<f64>::zeros(3, 3);
        for i in 0..3 {
            eye.data[i * 3 + i] = 1.0;
        }
        assert_eq!(linear_forward(&x, &eye, &[0.0; 3]).unwrap(), x);
    }

    #[test]
    fn zero_input_broadcasts_bias() {
        let x = Matrix::<f32>::zeros(4, 2);
        let w = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = linear_forward(&x, &w, &[7.0, 8.0, 9.0]).unwrap();
        for r in 0..4 {
            assert_eq!(y.row(r), &[7.0, 8.0, 9.0]);
        }
    }

    #[test]
    fn matches_loop_product() {
        let mut rng = rng_from_seed(21);
        let x = Matrix::from_vec(2, 3, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = Matrix::from_vec(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = [0.25, -0.75];
        let y: Matrix<f64> = linear_forward(&x, &w, &b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = b[j];
                for k in 0..3 {
                    acc += x.get(i, k) * w.get(k, j);
                }
                assert!((y.get(i, j) - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng_from_seed(4);
        let x = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = Matrix::from_vec(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let r = Matrix::from_vec(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let loss = |x: &Matrix<f64>, w: &Matrix<f64>| -> f64 {
            let y = linear_forward(x, w, &[0.1, 0.2]).unwrap();
            y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        let g = linear_backward(&r, &x, &w).unwrap();
        let h = 1e-4;
        for i in 0..w.data.len() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p.data[i] += h;
            m.data[i] -= h;
            let num = (loss(&x, &p) - loss(&x, &m)) / (2.0 * h);
            assert!((num - g.weights.data[i]).abs() < 1e-8);
        }
        for i in 0..x.data.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data[i] += h;
            m.data[i] -= h;
            let num = (loss(&p, &w) - loss(&m, &w)) / (2.0 * h);
            assert!((num - g.input.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn inner_extent_mismatch_rejected() {
        let x = Matrix::<f32>::zeros(2, 3);
        let w = Matrix::<f32>::zeros(2, 3);
        assert!(linear_forward(&x, &w, &[0.0; 3]).is_err());
    }
}
