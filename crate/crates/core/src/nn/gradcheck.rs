//! Finite-difference verification of analytic gradients.

use super::{Layer, Network, Tensor4};
use crate::Result;

/// Central-difference step used by the checks.
pub const FD_STEP: f64 = 1e-4;

/// Gradients smaller than this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerError {
    pub layer: String,
    pub kind: &'static str,
    pub params_checked: usize,
    /// Entries whose perturbation moved a ReLU input across zero.
    pub kinks_skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub layers: Vec<LayerError>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.layers.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Scalar loss of a network output plus its gradient with respect to that output.
pub type LossFn<'a> = dyn Fn(&Tensor4<f64>) -> Result<(f64, Tensor4<f64>)> + 'a;

fn loss_at(net: &mut Network<f64>, input: &Tensor4<f64>, loss: &LossFn) -> Result<(f64, Vec<bool>)> {
    let y = net.forward(input)?;
    let mut signs = Vec::new();
    for layer in net.layers() {
        if let Layer::Relu { input: Some(x) } = layer {
            signs.extend(x.data().iter().map(|&v| v > 0.0));
        }
    }
    Ok((loss(&y)?.0, signs))
}

/// Central difference, or `None` when the two probes straddle a ReLU kink.
fn central_difference(plus: (f64, Vec<bool>), minus: (f64, Vec<bool>)) -> Option<f64> {
    (plus.1 == minus.1).then(|| (plus.0 - minus.0) / (2.0 * FD_STEP))
}

/// Compare every parameter's analytic gradient against central differences and
/// report the worst relative error per parameterized layer.
pub fn gradcheck(net: &mut Network<f64>, input: &Tensor4<f64>, loss: &LossFn) -> Result<GradcheckReport> {
    gradcheck_sampled(net, input, loss, usize::MAX, 0)
}

/// Like [`gradcheck`] but checks at most `per_param` seeded entries of each
/// parameter tensor.
pub fn gradcheck_sampled(
    net: &mut Network<f64>,
    input: &Tensor4<f64>,
    loss: &LossFn,
    per_param: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    net.zero_grad();
    let y = net.forward(input)?;
    let (_, dy) = loss(&y)?;
    net.backward(dy)?;
    let analytic: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();
    let mut rng = crate::rng_from_seed(seed);

    // (layer name, kind, index range into the flat param list)
    let mut groups = Vec::new();
    let mut offset = 0;
    for (layer, name) in net.layers().iter().zip(net.layer_names()) {
        let n = layer.params().len();
        if n > 0 {
            groups.push((name.clone(), layer.kind(), offset..offset + n));
        }
        offset += n;
    }

    let mut report = GradcheckReport::default();
    for (name, kind, range) in groups {
        let mut worst = 0f64;
        let mut checked = 0;
        let mut kinks = 0;
        for pi in range {
            let len = analytic[pi].len();
            let entries: Vec<usize> = if per_param >= len {
                (0..len).collect()
            } else {
                rand::seq::index::sample(&mut rng, len, per_param).into_vec()
            };
            for j in entries {
                let orig = net.params()[pi].value[j];
                net.params_mut()[pi].value[j] = orig + FD_STEP;
                let plus = loss_at(net, input, loss)?;
                net.params_mut()[pi].value[j] = orig - FD_STEP;
                let minus = loss_at(net, input, loss)?;
                net.params_mut()[pi].value[j] = orig;
                match central_difference(plus, minus) {
                    Some(numeric) => {
                        worst = worst.max(rel_error(analytic[pi][j], numeric));
                        checked += 1;
                    }
                    None => kinks += 1,
                }
            }
        }
        report.layers.push(LayerError { layer: name, kind, params_checked: checked, kinks_skipped: kinks, max_rel_error: worst });
    }
    Ok(report)
}

/// Worst relative error of the gradient with respect to the network input.
pub fn gradcheck_input(net: &mut Network<f64>, input: &Tensor4<f64>, loss: &LossFn) -> Result<f64> {
    net.zero_grad();
    let y = net.forward(input)?;
    let (_, dy) = loss(&y)?;
    let dx = net.backward(dy)?;
    let mut worst = 0f64;
    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_STEP;
        let plus = loss_at(net, &x, loss)?;
        x.data_mut()[i] = orig - FD_STEP;
        let minus = loss_at(net, &x, loss)?;
        x.data_mut()[i] = orig;
        if let Some(numeric) = central_difference(plus, minus) {
            worst = worst.max(rel_error(dx.data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{mse_loss, LayerSpec, Matrix};
    use crate::rng_from_seed;

    fn mse_to(target: Matrix<f64>) -> impl Fn(&Tensor4<f64>) -> Result<(f64, Tensor4<f64>)> {
        move |y: &Tensor4<f64>| {
            let (l, g) = mse_loss(&Matrix::from_tensor(y.clone()), &target, None)?;
            Ok((l, g.into_tensor()))
        }
    }

    #[test]
    fn single_linear_layer_with_mse() {
        let mut rng = rng_from_seed(13);
        let mut net =
            Network::<f64>::build(&[LayerSpec::Linear { in_features: 5, out_features: 3 }], [4, 5, 1, 1], &mut rng)
                .unwrap();
        let x = Tensor4::randn([4, 5, 1, 1], 1.0, &mut rng);
        let target = Matrix::from_tensor(Tensor4::randn([4, 3, 1, 1], 1.0, &mut rng));
        let report = gradcheck(&mut net, &x, &mse_to(target)).unwrap();
        assert_eq!(report.layers.len(), 1);
        assert_eq!(report.layers[0].params_checked, 18);
        assert!(report.max_rel_error() < 1e-5, "{report:?}");
    }

    #[test]
    fn zero_parameter_network_gives_empty_report() {
        let mut rng = rng_from_seed(1);
        let mut net = Network::<f64>::build(&[LayerSpec::Relu, LayerSpec::Flatten], [1, 2, 2, 2], &mut rng).unwrap();
        let x = Tensor4::randn([1, 2, 2, 2], 1.0, &mut rng);
        let target = Matrix::zeros(1, 8);
        let report = gradcheck(&mut net, &x, &mse_to(target)).unwrap();
        assert!(report.is_empty());
        assert_eq!(report.max_rel_error(), 0.0);
    }
}
