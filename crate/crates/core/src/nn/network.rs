use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    batchnorm2d, batchnorm2d_backward, conv2d_backward, conv2d_forward, conv_output_extent, elu, elu_backward,
    linear_backward, linear_forward, relu, relu_backward, BatchNormCache, ConvCache, Matrix, Scalar, Tensor4,
    BN_EPSILON,
};
use crate::{Error, Result};

/// Declarative description of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm2d { channels: usize },
    Elu,
    Relu,
    Flatten,
    Linear { in_features: usize, out_features: usize },
}

impl LayerSpec {
    /// Output shape for a given input shape, or a shape error.
    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let [n, c, h, w] = input;
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                if c != in_channels {
                    return Err(Error::shape("conv2d", format!("expected {in_channels} channels, got {c}")));
                }
                let oh = conv_output_extent(h, kernel, stride, padding);
                let ow = conv_output_extent(w, kernel, stride, padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok([n, out_channels, oh, ow]),
                    _ => Err(Error::shape("conv2d", format!("no valid output for input {h}x{w}"))),
                }
            }
            LayerSpec::BatchNorm2d { channels } => {
                if c != channels {
                    return Err(Error::shape("batchnorm2d", format!("expected {channels} channels, got {c}")));
                }
                Ok(input)
            }
            LayerSpec::Elu | LayerSpec::Relu => Ok(input),
            LayerSpec::Flatten => Ok([n, c * h * w, 1, 1]),
            LayerSpec::Linear { in_features, out_features } => {
                if c * h * w != in_features {
                    return Err(Error::shape("linear", format!("expected {in_features} features, got {}", c * h * w)));
                }
                Ok([n, out_features, 1, 1])
            }
        }
    }
}

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    fn new(name: String, shape: Vec<usize>, value: Vec<T>) -> Self {
        let n = value.len();
        Self { name, shape, value, grad: vec![T::zero(); n] }
    }

    fn accumulate(&mut self, g: &[T]) {
        for (a, &b) in self.grad.iter_mut().zip(g) {
            *a = *a + b;
        }
    }

    fn as_tensor4(&self) -> Tensor4<T> {
        let mut s = [1usize; 4];
        let off = 4 - self.shape.len();
        s[off..].copy_from_slice(&self.shape);
        Tensor4::from_vec(s, self.value.clone()).expect("param shape is consistent")
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv2d { weight: Param<T>, bias: Param<T>, stride: usize, padding: usize, cache: Option<ConvCache<T>> },
    BatchNorm2d { gain: Param<T>, shift: Param<T>, cache: Option<BatchNormCache<T>> },
    Elu { input: Option<Tensor4<T>> },
    Relu { input: Option<Tensor4<T>> },
    Flatten { shape: Option<[usize; 4]> },
    Linear { weight: Param<T>, bias: Param<T>, input: Option<Matrix<T>> },
}

impl<T: Scalar> Layer<T> {
    /// Instantiate with fan-in scaled normal weights (std `sqrt(2 / fan_in)`),
    /// zero biases, unit batch-norm gain and zero shift.
    pub fn from_spec<R: Rng + ?Sized>(spec: &LayerSpec, name: &str, rng: &mut R) -> Self {
        match *spec {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let fan_in = in_channels * kernel * kernel;
                let w = Tensor4::<T>::randn([out_channels, in_channels, kernel, kernel], (2.0 / fan_in as f64).sqrt(), rng);
                Layer::Conv2d {
                    weight: Param::new(format!("{name}.weight"), vec![out_channels, in_channels, kernel, kernel], w.into_data()),
                    bias: Param::new(format!("{name}.bias"), vec![out_channels], vec![T::zero(); out_channels]),
                    stride,
                    padding,
                    cache: None,
                }
            }
            LayerSpec::BatchNorm2d { channels } => Layer::BatchNorm2d {
                gain: Param::new(format!("{name}.gain"), vec![channels], vec![T::one(); channels]),
                shift: Param::new(format!("{name}.shift"), vec![channels], vec![T::zero(); channels]),
                cache: None,
            },
            LayerSpec::Elu => Layer::Elu { input: None },
            LayerSpec::Relu => Layer::Relu { input: None },
            LayerSpec::Flatten => Layer::Flatten { shape: None },
            LayerSpec::Linear { in_features, out_features } => {
                let w = Tensor4::<T>::randn([1, 1, in_features, out_features], (2.0 / in_features as f64).sqrt(), rng);
                Layer::Linear {
                    weight: Param::new(format!("{name}.weight"), vec![in_features, out_features], w.into_data()),
                    bias: Param::new(format!("{name}.bias"), vec![out_features], vec![T::zero(); out_features]),
                    input: None,
                }
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::BatchNorm2d { .. } => "batchnorm2d",
            Layer::Elu { .. } => "elu",
            Layer::Relu { .. } => "relu",
            Layer::Flatten { .. } => "flatten",
            Layer::Linear { .. } => "linear",
        }
    }

    pub fn forward(&mut self, x: Tensor4<T>) -> Result<Tensor4<T>> {
        match self {
            Layer::Conv2d { weight, bias, stride, padding, cache } => {
                let w = weight.as_tensor4();
                let y = conv2d_forward(&x, &w, &bias.value, *stride, *padding)?;
                *cache = Some(ConvCache { input: x, weights: w, stride: *stride, padding: *padding });
                Ok(y)
            }
            Layer::BatchNorm2d { gain, shift, cache } => {
                let (y, c) = batchnorm2d(&x, &gain.value, &shift.value, BN_EPSILON)?;
                *cache = Some(c);
                Ok(y)
            }
            Layer::Elu { input } => {
                let y = elu(&x);
                *input = Some(x);
                Ok(y)
            }
            Layer::Relu { input } => {
                let y = relu(&x);
                *input = Some(x);
                Ok(y)
            }
            Layer::Flatten { shape } => {
                let [n, c, h, w] = x.shape();
                *shape = Some(x.shape());
                x.reshape([n, c * h * w, 1, 1])
            }
            Layer::Linear { weight, bias, input } => {
                let m = Matrix::from_tensor(x);
                let w = Matrix::from_vec(weight.shape[0], weight.shape[1], weight.value.clone())?;
                let y = linear_forward(&m, &w, &bias.value)?;
                *input = Some(m);
                Ok(y.into_tensor())
            }
        }
    }

    /// Backpropagate `grad` through the layer, accumulating parameter gradients.
    pub fn backward(&mut self, grad: Tensor4<T>) -> Result<Tensor4<T>> {
        let kind = self.kind();
        let missing = || Error::MissingCache(kind.to_string());
        match self {
            Layer::Conv2d { weight, bias, cache, .. } => {
                let c = cache.as_ref().ok_or_else(missing)?;
                let g = conv2d_backward(&grad, c)?;
                weight.accumulate(g.weights.data());
                bias.accumulate(&g.bias);
                Ok(g.input)
            }
            Layer::BatchNorm2d { gain, shift, cache } => {
                let c = cache.as_ref().ok_or_else(missing)?;
                let g = batchnorm2d_backward(&grad, c)?;
                gain.accumulate(&g.gain);
                shift.accumulate(&g.shift);
                Ok(g.input)
            }
            Layer::Elu { input } => elu_backward(input.as_ref().ok_or_else(missing)?, &grad),
            Layer::Relu { input } => relu_backward(input.as_ref().ok_or_else(missing)?, &grad),
            Layer::Flatten { shape } => grad.reshape(shape.ok_or_else(missing)?),
            Layer::Linear { weight, bias, input } => {
                let x = input.as_ref().ok_or_else(missing)?;
                let w = Matrix::from_vec(weight.shape[0], weight.shape[1], weight.value.clone())?;
                let g = linear_backward(&Matrix::from_tensor(grad), x, &w)?;
                weight.accumulate(&g.weights.data);
                bias.accumulate(&g.bias);
                Ok(g.input.into_tensor())
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias, .. } => vec![weight, bias],
            Layer::BatchNorm2d { gain, shift, .. } => vec![gain, shift],
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias, .. } => vec![weight, bias],
            Layer::BatchNorm2d { gain, shift, .. } => vec![gain, shift],
            _ => Vec::new(),
        }
    }

    fn clear_cache(&mut self) {
        match self {
            Layer::Conv2d { cache, .. } => *cache = None,
            Layer::BatchNorm2d { cache, .. } => *cache = None,
            Layer::Elu { input } | Layer::Relu { input } => *input = None,
            Layer::Flatten { shape } => *shape = None,
            Layer::Linear { input, .. } => *input = None,
        }
    }
}

/// A feed-forward stack of layers.
#[derive(Clone, Debug)]
pub struct Network<T> {
    specs: Vec<LayerSpec>,
    names: Vec<String>,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Network<T> {
    /// Build a network, checking every layer against `input_shape`.
    pub fn build<R: Rng + ?Sized>(specs: &[LayerSpec], input_shape: [usize; 4], rng: &mut R) -> Result<Self> {
        let mut shape = input_shape;
        for s in specs {
            shape = s.output_shape(shape)?;
        }
        let mut counts = std::collections::HashMap::<&str, usize>::new();
        let mut names = Vec::with_capacity(specs.len());
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let kind = match spec {
                LayerSpec::Conv2d { .. } => "conv",
                LayerSpec::BatchNorm2d { .. } => "bn",
                LayerSpec::Elu => "elu",
                LayerSpec::Relu => "relu",
                LayerSpec::Flatten => "flatten",
                LayerSpec::Linear { .. } => "fc",
            };
            let idx = counts.entry(kind).or_default();
            *idx += 1;
            let name = format!("{kind}{idx}");
            layers.push(Layer::from_spec(spec, &name, rng));
            names.push(name);
        }
        Ok(Self { specs: specs.to_vec(), names, layers })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        self.specs.iter().try_fold(input, |s, spec| spec.output_shape(s))
    }

    pub fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(h)?;
        }
        Ok(h)
    }

    /// Forward pass that drops the backward caches; used for evaluation and
    /// bootstrap targets.
    pub fn infer(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let y = self.forward(x)?;
        self.layers.iter_mut().for_each(Layer::clear_cache);
        Ok(y)
    }

    /// Backward pass from the loss gradient at the output; returns the input gradient.
    pub fn backward(&mut self, grad: Tensor4<T>) -> Result<Tensor4<T>> {
        let mut g = grad;
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(g)?;
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut rng = crate::rng_from_seed(0);
        let mut out = Network::<U> {
            specs: self.specs.clone(),
            names: self.names.clone(),
            layers: self.specs.iter().zip(&self.names).map(|(s, n)| Layer::from_spec(s, n, &mut rng)).collect(),
        };
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            dst.value = src.value.iter().map(|v| U::from_f64(v.as_f64())).collect();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut rng = rng_from_seed(0);
        let spec = LayerSpec::Conv2d { in_channels: 1, out_channels: 1, kernel: 3, stride: 1, padding: 1 };
        let mut layer = Layer::<f32>::from_spec(&spec, "c", &mut rng);
        let err = layer.backward(Tensor4::zeros([1, 1, 3, 3])).unwrap_err();
        assert!(matches!(err, Error::MissingCache(_)));
    }

    #[test]
    fn build_validates_shapes() {
        let mut rng = rng_from_seed(0);
        let specs = [
            LayerSpec::Conv2d { in_channels: 3, out_channels: 2, kernel: 3, stride: 2, padding: 1 },
            LayerSpec::Flatten,
            LayerSpec::Linear { in_features: 2 * 4 * 4, out_features: 2 },
        ];
        let net = Network::<f32>::build(&specs, [1, 3, 8, 8], &mut rng).unwrap();
        assert_eq!(net.output_shape([1, 3, 8, 8]).unwrap(), [1, 2, 1, 1]);
        assert!(Network::<f32>::build(&specs, [1, 3, 10, 10], &mut rng).is_err());
        let names: Vec<_> = net.params().iter().map(|p| p.name.clone()).collect();
        assert_eq!(names, ["conv1.weight", "conv1.bias", "fc1.weight", "fc1.bias"]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let specs = [LayerSpec::Linear { in_features: 4, out_features: 3 }];
        let a = Network::<f32>::build(&specs, [1, 4, 1, 1], &mut rng_from_seed(5)).unwrap();
        let b = Network::<f32>::build(&specs, [1, 4, 1, 1], &mut rng_from_seed(5)).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn infer_matches_forward() {
        let specs = [
            LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Elu,
        ];
        let mut rng = rng_from_seed(8);
        let mut net = Network::<f32>::build(&specs, [1, 1, 4, 4], &mut rng).unwrap();
        let x = Tensor4::randn([1, 1, 4, 4], 1.0, &mut rng);
        assert_eq!(net.forward(&x).unwrap(), net.infer(&x).unwrap());
    }
}
