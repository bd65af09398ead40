//! Finite-difference gradient checks over every layer type and both network
//! architectures, shared by the test suites and the `gradcheck` stage.

use serde::Serialize;

use crate::cluster::cluster_cnn_specs;
use crate::dqn::{dqn_specs, AgentConfig};
use crate::nn::gradcheck::{gradcheck_input, gradcheck_sampled};
use crate::nn::{mse_loss, softmax_cross_entropy_channels, LayerSpec, Matrix, Network, Tensor4};
use crate::{rng_from_seed, Result};

/// Relative error bound every check must stay under.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

/// Entries checked per parameter tensor of the full-width architectures.
pub const ARCHITECTURE_SAMPLES: usize = 48;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub params_checked: usize,
    pub kinks_skipped: usize,
    pub max_param_error: f64,
    pub input_error: f64,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.max_param_error.max(self.input_error)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < GRADCHECK_TOLERANCE
    }
}

fn mse_loss_fn(target: Matrix<f64>) -> impl Fn(&Tensor4<f64>) -> Result<(f64, Tensor4<f64>)> {
    move |y: &Tensor4<f64>| {
        let (l, g) = mse_loss(&Matrix::from_tensor(y.clone()), &target, None)?;
        Ok((l, g.into_tensor()))
    }
}

/// MSE against a random target of the network's output shape.
fn run(name: &str, specs: &[LayerSpec], input_shape: [usize; 4], per_param: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = rng_from_seed(seed);
    let mut net = Network::<f64>::build(specs, input_shape, &mut rng)?;
    let x = Tensor4::randn(input_shape, 1.0, &mut rng);
    let out = net.output_shape(input_shape)?;
    let target = Matrix::from_tensor(Tensor4::randn([out[0], out[1] * out[2] * out[3], 1, 1], 1.0, &mut rng));
    let loss = |y: &Tensor4<f64>| {
        let flat = y.clone().reshape([out[0], out[1] * out[2] * out[3], 1, 1])?;
        let (l, g) = mse_loss_fn(target.clone())(&flat)?;
        Ok((l, g.reshape(out)?))
    };
    let report = gradcheck_sampled(&mut net, &x, &loss, per_param, seed)?;
    let input_error = gradcheck_input(&mut net, &x, &loss)?;
    Ok(GradCheck {
        name: name.to_string(),
        params_checked: report.layers.iter().map(|l| l.params_checked).sum(),
        kinks_skipped: report.layers.iter().map(|l| l.kinks_skipped).sum(),
        max_param_error: report.max_rel_error(),
        input_error,
    })
}

/// Clustering network at 8x8 with its per-pixel cross-entropy loss.
fn run_cluster_architecture(channels: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = rng_from_seed(seed);
    let shape = [1, 3, 8, 8];
    let mut net = Network::<f64>::build(&cluster_cnn_specs(3, channels), shape, &mut rng)?;
    let x = Tensor4::randn(shape, 1.0, &mut rng);
    let targets: Vec<usize> = (0..64).map(|i| (i * 7 + 3) % channels).collect();
    let loss = |y: &Tensor4<f64>| softmax_cross_entropy_channels(y, &targets);
    let report = gradcheck_sampled(&mut net, &x, &loss, ARCHITECTURE_SAMPLES, seed)?;
    let input_error = gradcheck_input(&mut net, &x, &loss)?;
    Ok(GradCheck {
        name: format!("clustering network ({channels} channels)"),
        params_checked: report.layers.iter().map(|l| l.params_checked).sum(),
        kinks_skipped: report.layers.iter().map(|l| l.kinks_skipped).sum(),
        max_param_error: report.max_rel_error(),
        input_error,
    })
}

/// Every layer type on its own, then both full architectures at 8x8.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let conv = |i, o, stride, padding| LayerSpec::Conv2d { in_channels: i, out_channels: o, kernel: 3, stride, padding };
    let full = usize::MAX;
    let agent = AgentConfig::default();
    Ok(vec![
        run("conv2d stride 1", &[conv(3, 4, 1, 1)], [2, 3, 6, 6], full, seed)?,
        run("conv2d stride 2", &[conv(3, 4, 2, 1)], [2, 3, 7, 7], full, seed + 1)?,
        run("batchnorm2d", &[LayerSpec::BatchNorm2d { channels: 3 }], [2, 3, 4, 4], full, seed + 2)?,
        run("elu", &[LayerSpec::Elu], [2, 3, 4, 4], full, seed + 3)?,
        run("relu", &[LayerSpec::Relu], [2, 3, 4, 4], full, seed + 4)?,
        run(
            "flatten + linear",
            &[LayerSpec::Flatten, LayerSpec::Linear { in_features: 48, out_features: 5 }],
            [2, 3, 4, 4],
            full,
            seed + 5,
        )?,
        run_cluster_architecture(100, seed + 6)?,
        run(
            "deep Q-network",
            &dqn_specs(agent.conv_channels, agent.hidden_units, 8, 8)?,
            [2, 3, 8, 8],
            ARCHITECTURE_SAMPLES,
            seed + 7,
        )?,
    ])
}
