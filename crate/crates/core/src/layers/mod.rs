//! Network layers with interchangeable float and bit-packed forward passes.
//!
//! A binary layer (`QConv`/`QFc` with a 1-bit [`QuantSpec`]) produces its
//! output in the popcount domain `[0, K]` in every mode: the float modes
//! compute the ±1 dot product with a float GEMM and map it through
//! `(dot + K) / 2`, the packed mode runs an xnor kernel directly. Both give
//! the same integers.

mod activation;
mod lenet;
mod linear;
mod network;
mod norm;
mod pool;
mod softmax;
pub mod train;

pub use activation::{QActivation, Tanh};
pub use lenet::{build_lenet, build_lenet_quantized, LENET_CLASSES, LENET_INPUT};
pub use linear::Linear;
pub use network::Network;
pub use norm::BatchNorm;
pub use pool::MaxPool;
pub use softmax::{softmax_ce_forward, SoftmaxCe};

use rand::Rng;

use crate::error::{Error, Result};
use crate::qmath::QuantSpec;
use crate::tensor::{TensorF32, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Float arithmetic, batch statistics, caches kept for backward.
    TrainFloat,
    /// Float arithmetic with running statistics.
    InferFloat,
    /// Binary layers run xnor kernels on packed weights; everything else as
    /// `InferFloat`.
    InferPacked,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::TrainFloat
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub filters: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeometry {
    pub fn new(in_channels: usize, filters: usize, kernel: (usize, usize)) -> Self {
        ConvGeometry {
            in_channels,
            filters,
            kernel,
            stride: (1, 1),
            pad: (0, 0),
        }
    }

    pub fn window(&self) -> Window {
        Window::new(self.kernel, self.stride, self.pad)
    }

    /// Reduction length of the lowered GEMM, `in_c·kh·kw`.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }
}

/// Declarative description of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    QActivation { act_bit: QuantSpec },
    QConv { geom: ConvGeometry, act_bit: QuantSpec },
    QFc { inputs: usize, units: usize, act_bit: QuantSpec },
    Conv { geom: ConvGeometry, bias: bool },
    Fc { inputs: usize, units: usize, bias: bool },
    BatchNorm { channels: usize, momentum: f32, epsilon: f32 },
    MaxPool { kernel: (usize, usize), stride: (usize, usize) },
    Tanh,
    SoftmaxCe,
}

impl LayerSpec {
    pub const BN_MOMENTUM: f32 = 0.9;
    pub const BN_EPSILON: f32 = 1e-5;

    pub fn batchnorm(channels: usize) -> Self {
        LayerSpec::BatchNorm {
            channels,
            momentum: Self::BN_MOMENTUM,
            epsilon: Self::BN_EPSILON,
        }
    }

    pub fn maxpool2() -> Self {
        LayerSpec::MaxPool {
            kernel: (2, 2),
            stride: (2, 2),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::QActivation { .. } => "qactivation",
            LayerSpec::QConv { .. } => "qconv",
            LayerSpec::QFc { .. } => "qfc",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Fc { .. } => "fc",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Tanh => "tanh",
            LayerSpec::SoftmaxCe => "softmax_ce",
        }
    }

    /// A QConv/QFc computing with 1-bit values.
    pub fn is_binary(&self) -> bool {
        match self {
            LayerSpec::QConv { act_bit, .. } | LayerSpec::QFc { act_bit, .. } => act_bit.is_binary(),
            _ => false,
        }
    }

    pub fn is_quantized_linear(&self) -> bool {
        matches!(self, LayerSpec::QConv { .. } | LayerSpec::QFc { .. })
    }
}

/// A trainable tensor with its gradient and momentum buffers.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: TensorF32,
    pub grad: Vec<f32>,
    velocity: Vec<f32>,
}

impl Param {
    pub fn new(value: TensorF32) -> Self {
        let n = value.len();
        Param {
            value,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
        }
    }

    pub(crate) fn uniform(dims: Vec<usize>, limit: f32, rng: &mut impl Rng) -> Result<Self> {
        let n = dims.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
        Ok(Param::new(TensorF32::new(dims, data)?))
    }

    pub(crate) fn grad_is_finite(&self) -> bool {
        self.grad.iter().all(|g| g.is_finite())
    }

    /// `v ← μ·v + g`, `w ← w − lr·v`.
    pub(crate) fn sgd_step(&mut self, lr: f32, momentum: f32) {
        for ((w, v), &g) in self
            .value
            .data_mut()
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .zip(&self.grad)
        {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
    }
}

/// Glorot-uniform limit `sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot_limit(fan_in: usize, fan_out: usize) -> f32 {
    (6.0 / (fan_in + fan_out) as f32).sqrt()
}

/// A layer instance: parameters, running state, and forward caches.
#[derive(Debug, Clone)]
pub enum Layer {
    QActivation(QActivation),
    Linear(Linear),
    BatchNorm(BatchNorm),
    MaxPool(MaxPool),
    Tanh(Tanh),
    SoftmaxCe(SoftmaxCe),
}

impl Layer {
    pub(crate) fn build(spec: &LayerSpec, input: &[usize], rng: &mut impl Rng) -> Result<Layer> {
        Ok(match *spec {
            LayerSpec::QActivation { act_bit } => Layer::QActivation(QActivation::new(act_bit)),
            LayerSpec::QConv { .. } | LayerSpec::Conv { .. } | LayerSpec::QFc { .. } | LayerSpec::Fc { .. } => {
                Layer::Linear(Linear::new(spec, input, rng)?)
            }
            LayerSpec::BatchNorm {
                channels,
                momentum,
                epsilon,
            } => Layer::BatchNorm(BatchNorm::new(channels, momentum, epsilon)?),
            LayerSpec::MaxPool { kernel, stride } => Layer::MaxPool(MaxPool::new(kernel, stride)),
            LayerSpec::Tanh => Layer::Tanh(Tanh::default()),
            LayerSpec::SoftmaxCe => Layer::SoftmaxCe(SoftmaxCe::default()),
        })
    }

    /// Output dims (without batch) for input dims (without batch).
    pub(crate) fn output_dims(spec: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
        match *spec {
            LayerSpec::QActivation { .. } | LayerSpec::Tanh => Ok(input.to_vec()),
            LayerSpec::QConv { geom, .. } | LayerSpec::Conv { geom, .. } => {
                let &[c, h, w] = input else {
                    return Err(Error::shape(format!("convolution needs [c, h, w] input, got {input:?}")));
                };
                if c != geom.in_channels {
                    return Err(Error::shape(format!(
                        "convolution expects {} channels, input has {c}",
                        geom.in_channels
                    )));
                }
                let (oh, ow) = geom.window().output_hw(h, w)?;
                Ok(vec![geom.filters, oh, ow])
            }
            LayerSpec::QFc { inputs, units, .. } | LayerSpec::Fc { inputs, units, .. } => {
                let n: usize = input.iter().product();
                if n != inputs {
                    return Err(Error::shape(format!(
                        "fully connected layer expects {inputs} inputs, got {input:?}"
                    )));
                }
                Ok(vec![units])
            }
            LayerSpec::BatchNorm { channels, .. } => {
                if input.first() != Some(&channels) {
                    return Err(Error::shape(format!(
                        "batchnorm over {channels} channels, input is {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::MaxPool { kernel, stride } => {
                let &[c, h, w] = input else {
                    return Err(Error::shape(format!("pooling needs [c, h, w] input, got {input:?}")));
                };
                let (oh, ow) = Window::new(kernel, stride, (0, 0)).output_hw(h, w)?;
                Ok(vec![c, oh, ow])
            }
            LayerSpec::SoftmaxCe => {
                if input.len() != 1 {
                    return Err(Error::shape(format!("softmax needs flat class scores, got {input:?}")));
                }
                Ok(input.to_vec())
            }
        }
    }

    pub fn forward_infer(&self, x: &TensorF32, mode: Mode, workers: usize) -> Result<TensorF32> {
        debug_assert!(!mode.is_train());
        match self {
            Layer::QActivation(l) => Ok(l.forward(x)),
            Layer::Linear(l) => l.forward_infer(x, mode, workers),
            Layer::BatchNorm(l) => l.forward_infer(x),
            Layer::MaxPool(l) => l.forward_infer(x),
            Layer::Tanh(_) => Ok(x.map(f32::tanh)),
            Layer::SoftmaxCe(_) => softmax::softmax(x),
        }
    }

    pub(crate) fn forward_train(&mut self, x: &TensorF32) -> Result<TensorF32> {
        match self {
            Layer::QActivation(l) => Ok(l.forward_train(x)),
            Layer::Linear(l) => l.forward_train(x),
            Layer::BatchNorm(l) => l.forward_train(x),
            Layer::MaxPool(l) => l.forward_train(x),
            Layer::Tanh(l) => Ok(l.forward_train(x)),
            Layer::SoftmaxCe(l) => l.forward_train(x),
        }
    }

    /// Fills parameter gradients and returns the input gradient (skipped,
    /// returning `None`, when `need_input_grad` is false).
    pub(crate) fn backward(&mut self, grad: &TensorF32, need_input_grad: bool) -> Result<Option<TensorF32>> {
        match self {
            Layer::QActivation(l) => l.backward(grad).map(Some),
            Layer::Linear(l) => l.backward(grad, need_input_grad),
            Layer::BatchNorm(l) => l.backward(grad).map(Some),
            Layer::MaxPool(l) => l.backward(grad).map(Some),
            Layer::Tanh(l) => l.backward(grad).map(Some),
            Layer::SoftmaxCe(_) => Err(Error::InvalidArgument(
                "softmax_ce starts the backward pass; it has no upstream gradient".into(),
            )),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Param)> {
        match self {
            Layer::Linear(l) => l.params(),
            Layer::BatchNorm(l) => vec![("gamma", &l.gamma), ("beta", &l.beta)],
            _ => Vec::new(),
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        match self {
            Layer::Linear(l) => l.params_mut(),
            Layer::BatchNorm(l) => vec![("gamma", &mut l.gamma), ("beta", &mut l.beta)],
            _ => Vec::new(),
        }
    }

    pub(crate) fn clear_cache(&mut self) {
        match self {
            Layer::QActivation(l) => l.cache = None,
            Layer::Linear(l) => l.clear_cache(),
            Layer::BatchNorm(l) => l.cache = None,
            Layer::MaxPool(l) => l.cache = None,
            Layer::Tanh(l) => l.cache = None,
            Layer::SoftmaxCe(l) => {
                l.logits = None;
                l.probs = None;
            }
        }
    }
}

pub(crate) fn stale_cache(kind: &str) -> Error {
    Error::InvalidArgument(format!("{kind}: backward without a matching train forward"))
}
