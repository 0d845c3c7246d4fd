use super::{ConvGeometry, LayerSpec, Network};
use crate::error::Result;
use crate::qmath::QuantSpec;

pub const LENET_INPUT: [usize; 3] = [1, 28, 28];
pub const LENET_CLASSES: usize = 10;

const FILTERS: usize = 64;
const KERNEL: (usize, usize) = (5, 5);
const HIDDEN: usize = 1000;
/// 64 channels × 4 × 4 after the second pooling stage.
const FLAT: usize = FILTERS * 4 * 4;

/// LeNet for 28×28 digits. With `binary`, the second convolution and the
/// first fully connected layer become 1-bit `QConv`/`QFc` blocks; the first
/// convolution and the classifier stay full precision either way.
pub fn build_lenet(binary: bool, seed: u64) -> Result<Network> {
    build_lenet_quantized(binary.then_some(QuantSpec::BINARY), seed)
}

/// As [`build_lenet`], with the quantized blocks computing at `act_bit`
/// (`None` for the all-float network).
pub fn build_lenet_quantized(act_bit: Option<QuantSpec>, seed: u64) -> Result<Network> {
    let conv1 = LayerSpec::Conv {
        geom: ConvGeometry::new(1, FILTERS, KERNEL),
        bias: true,
    };
    let conv2 = ConvGeometry::new(FILTERS, FILTERS, KERNEL);
    let classifier = LayerSpec::Fc {
        inputs: HIDDEN,
        units: LENET_CLASSES,
        bias: true,
    };
    // conv2 and fc1 feed a BatchNorm, which absorbs any bias; pooling
    // before tanh is the same function at a quarter of the tanh calls
    let specs = match act_bit {
        Some(act_bit) => vec![
            conv1,
            LayerSpec::maxpool2(),
            LayerSpec::Tanh,
            LayerSpec::batchnorm(FILTERS),
            LayerSpec::QActivation { act_bit },
            LayerSpec::QConv { geom: conv2, act_bit },
            LayerSpec::batchnorm(FILTERS),
            LayerSpec::maxpool2(),
            LayerSpec::QActivation { act_bit },
            LayerSpec::QFc {
                inputs: FLAT,
                units: HIDDEN,
                act_bit,
            },
            LayerSpec::batchnorm(HIDDEN),
            LayerSpec::Tanh,
            classifier,
            LayerSpec::SoftmaxCe,
        ],
        None => vec![
            conv1,
            LayerSpec::maxpool2(),
            LayerSpec::Tanh,
            LayerSpec::batchnorm(FILTERS),
            LayerSpec::Conv { geom: conv2, bias: false },
            LayerSpec::batchnorm(FILTERS),
            LayerSpec::maxpool2(),
            LayerSpec::Tanh,
            LayerSpec::Fc {
                inputs: FLAT,
                units: HIDDEN,
                bias: false,
            },
            LayerSpec::batchnorm(HIDDEN),
            LayerSpec::Tanh,
            classifier,
            LayerSpec::SoftmaxCe,
        ],
    };
    Network::new(&LENET_INPUT, specs, seed)
}
