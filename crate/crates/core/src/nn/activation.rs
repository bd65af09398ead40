use super::{Scalar, Tensor4};
use crate::{Error, Result};

/// `x` for `x >= 0`, `exp(x) - 1` otherwise.
pub fn elu<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|x| if x >= T::zero() { x } else { x.exp_m1() })
}

pub fn elu_backward<T: Scalar>(input: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    zip_grad("elu_backward", input, grad_out, |x, g| if x >= T::zero() { g } else { g * x.exp() })
}

pub fn relu<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(input: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    zip_grad("relu_backward", input, grad_out, |x, g| if x > T::zero() { g } else { T::zero() })
}

fn zip_grad<T: Scalar>(
    op: &'static str,
    input: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor4<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", input.shape(), grad_out.shape())));
    }
    let data = input.data().iter().zip(grad_out.data()).map(|(&x, &g)| f(x, g)).collect();
    Tensor4::from_vec(input.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor4<f64> {
        Tensor4::from_vec([1, 1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn elu_values() {
        assert_eq!(elu(&scalar(0.0)).data()[0], 0.0);
        assert_eq!(elu(&scalar(2.5)).data()[0], 2.5);
        let v = elu(&scalar(-1.0)).data()[0];
        assert!((v - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((v + 0.632).abs() < 1e-3);
    }

    #[test]
    fn relu_values() {
        assert_eq!(relu(&scalar(-5.0)).data()[0], 0.0);
        assert_eq!(relu(&scalar(3.0)).data()[0], 3.0);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-4;
        for &x in &[-2.0, -0.3, 0.4, 1.7] {
            let num = (elu(&scalar(x + h)).data()[0] - elu(&scalar(x - h)).data()[0]) / (2.0 * h);
            let ana = elu_backward(&scalar(x), &scalar(1.0)).unwrap().data()[0];
            assert!((num - ana).abs() / ana.abs() < 1e-3);
            let num = (relu(&scalar(x + h)).data()[0] - relu(&scalar(x - h)).data()[0]) / (2.0 * h);
            let ana = relu_backward(&scalar(x), &scalar(1.0)).unwrap().data()[0];
            assert!((num - ana).abs() < 1e-9);
        }
    }

    #[test]
    fn elu_is_monotone() {
        let xs: Vec<f64> = (-50..=50).map(|i| i as f64 * 0.1).collect();
        let t = Tensor4::from_vec([1, 1, 1, xs.len()], xs).unwrap();
        let y = elu(&t);
        assert!(y.data().windows(2).all(|w| w[0] < w[1]));
    }
}
