use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Layer, LayerSpec, Mode};
use crate::bitpack::BitMatrix;
use crate::error::{Error, Result};
use crate::tensor::TensorF32;

/// A feed-forward stack of layers ending in `SoftmaxCe`.
#[derive(Debug, Clone)]
pub struct Network {
    input_dims: Vec<usize>,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    workers: usize,
    packed_storage: bool,
}

impl Network {
    /// Builds and initializes a network for inputs of `input_dims`
    /// (without the batch axis). Weights are deterministic in `seed`.
    pub fn new(input_dims: &[usize], specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        match specs.iter().position(|s| *s == LayerSpec::SoftmaxCe) {
            Some(i) if i + 1 == specs.len() => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "a network must end with exactly one softmax_ce layer".into(),
                ))
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = input_dims.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let layer = Layer::build(spec, &dims, &mut rng).map_err(|e| Error::layer(i, e.to_string()))?;
            dims = Layer::output_dims(spec, &dims).map_err(|e| Error::layer(i, e.to_string()))?;
            layers.push(layer);
        }
        Ok(Network {
            input_dims: input_dims.to_vec(),
            specs,
            layers,
            workers: 1,
            packed_storage: false,
        })
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Worker threads for packed kernels.
    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn set_workers(&mut self, workers: usize) {
        self.workers = workers.max(1);
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn binary_layers(&self) -> Vec<usize> {
        (0..self.specs.len()).filter(|&i| self.specs[i].is_binary()).collect()
    }

    /// True when every binary layer carries packed weights.
    pub fn is_packed(&self) -> bool {
        self.binary_layers().iter().all(|&i| match &self.layers[i] {
            Layer::Linear(l) => l.packed.is_some(),
            _ => false,
        })
    }

    /// Packs the binarized weights of every binary layer.
    pub fn prepare_packed(&mut self) {
        for layer in &mut self.layers {
            if let Layer::Linear(l) = layer {
                l.refresh_packed();
            }
        }
    }

    pub(crate) fn install_packed(&mut self, index: usize, packed: BitMatrix) -> Result<()> {
        match self.layers.get_mut(index) {
            Some(Layer::Linear(l)) => l.install_packed(packed).map_err(|e| Error::layer(index, e.to_string()))?,
            _ => return Err(Error::layer(index, "packed weights on a layer without weights")),
        }
        self.packed_storage = true;
        Ok(())
    }

    /// Replaces every binary weight by its sign and keeps it packed; the
    /// network then saves with 1-bit weight storage.
    pub fn pack_binary_weights(&mut self) -> Result<()> {
        for i in self.binary_layers() {
            let Layer::Linear(l) = &mut self.layers[i] else {
                unreachable!("binary spec on a non-linear layer")
            };
            l.refresh_packed();
            let packed = l.packed.take().expect("binary layer packs");
            self.install_packed(i, packed)?;
        }
        Ok(())
    }

    /// True when the binary weights are held as packed bits (loaded from
    /// a converted file or after [`Network::pack_binary_weights`]).
    pub fn stores_packed(&self) -> bool {
        self.packed_storage
    }

    /// `InferPacked` for packed-storage networks, `InferFloat` otherwise.
    pub fn default_mode(&self) -> Mode {
        if self.packed_storage {
            Mode::InferPacked
        } else {
            Mode::InferFloat
        }
    }

    /// The first and last weighted layers are full precision.
    pub fn has_full_precision_ends(&self) -> bool {
        let weighted: Vec<&LayerSpec> = self
            .specs
            .iter()
            .filter(|s| matches!(s, LayerSpec::Conv { .. } | LayerSpec::Fc { .. } | LayerSpec::QConv { .. } | LayerSpec::QFc { .. }))
            .collect();
        match (weighted.first(), weighted.last()) {
            (Some(first), Some(last)) => !first.is_quantized_linear() && !last.is_quantized_linear(),
            _ => true,
        }
    }

    fn check_input(&self, x: &TensorF32) -> Result<()> {
        if x.dims().len() != self.input_dims.len() + 1 || x.dims()[1..] != self.input_dims[..] {
            return Err(Error::shape(format!(
                "network input must be [batch, {:?}], got {:?}",
                self.input_dims,
                x.dims()
            )));
        }
        if !x.is_finite() {
            return Err(Error::InvalidArgument("network input contains NaN or infinity".into()));
        }
        Ok(())
    }

    fn check_mode(&self, mode: Mode) -> Result<()> {
        if mode == Mode::InferPacked && !self.is_packed() {
            return Err(Error::InvalidArgument(
                "packed inference before the binary weights were packed".into(),
            ));
        }
        Ok(())
    }

    /// Runs layer `index` alone in an inference mode.
    pub fn layer_forward(&self, index: usize, x: &TensorF32, mode: Mode) -> Result<TensorF32> {
        if mode.is_train() {
            return Err(Error::InvalidArgument("layer_forward runs inference modes only".into()));
        }
        self.layers[index]
            .forward_infer(x, mode, self.workers)
            .map_err(|e| Error::layer(index, e.to_string()))
    }

    /// Output of every layer, in an inference mode.
    pub fn trace(&self, x: &TensorF32, mode: Mode) -> Result<Vec<TensorF32>> {
        self.check_input(x)?;
        self.check_mode(mode)?;
        let mut outs: Vec<TensorF32> = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let input = outs.last().unwrap_or(x);
            let y = self.layer_forward(i, input, mode)?;
            outs.push(y);
        }
        Ok(outs)
    }

    /// Class probabilities.
    pub fn infer(&self, x: &TensorF32, mode: Mode) -> Result<TensorF32> {
        Ok(self.trace(x, mode)?.pop().expect("network has layers"))
    }

    /// Pre-softmax class scores.
    pub fn logits(&self, x: &TensorF32, mode: Mode) -> Result<TensorF32> {
        let mut outs = self.trace(x, mode)?;
        outs.pop();
        Ok(outs.pop().unwrap_or_else(|| x.clone()))
    }

    /// Train-mode forward of every layer, keeping caches for [`Network::backward`].
    pub fn forward_train_trace(&mut self, x: &TensorF32) -> Result<Vec<TensorF32>> {
        self.check_input(x)?;
        let mut outs: Vec<TensorF32> = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let input = outs.last().unwrap_or(x);
            let y = self.layers[i]
                .forward_train(input)
                .map_err(|e| Error::layer(i, e.to_string()))?;
            outs.push(y);
        }
        Ok(outs)
    }

    pub fn forward_train(&mut self, x: &TensorF32) -> Result<TensorF32> {
        Ok(self.forward_train_trace(x)?.pop().expect("network has layers"))
    }

    fn head(&self) -> &super::SoftmaxCe {
        match self.layers.last() {
            Some(Layer::SoftmaxCe(s)) => s,
            _ => unreachable!("validated in Network::new"),
        }
    }

    /// Mean cross-entropy of the last train-mode forward.
    pub fn loss(&self, labels: &[usize]) -> Result<f32> {
        self.head().loss(labels)
    }

    /// Backpropagates the loss of the last train-mode forward, overwriting
    /// every parameter gradient. Caches are consumed.
    pub fn backward(&mut self, labels: &[usize]) -> Result<()> {
        let last = self.layers.len() - 1;
        let mut grad = match &mut self.layers[last] {
            Layer::SoftmaxCe(s) => s.backward(labels)?,
            _ => unreachable!("validated in Network::new"),
        };
        for i in (0..last).rev() {
            match self.layers[i].backward(&grad, i > 0).map_err(|e| Error::layer(i, e.to_string()))? {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok(())
    }

    /// Momentum SGD on every parameter. Refuses to touch any weight when a
    /// gradient is non-finite. Packed weight caches are dropped.
    pub fn sgd_step(&mut self, lr: f32, momentum: f32) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, p) in layer.params() {
                if !p.grad_is_finite() {
                    return Err(Error::NonFiniteGradient { layer: i, param: name });
                }
            }
        }
        self.packed_storage = false;
        for layer in &mut self.layers {
            for (_, p) in layer.params_mut() {
                p.sgd_step(lr, momentum);
            }
            if let Layer::Linear(l) = layer {
                l.packed = None;
            }
        }
        Ok(())
    }

    /// Forward, backward and one SGD step; returns the batch loss.
    pub fn train_batch(&mut self, x: &TensorF32, labels: &[usize], lr: f32, momentum: f32) -> Result<f32> {
        self.forward_train(x)?;
        let loss = self.loss(labels)?;
        if !loss.is_finite() {
            self.clear_caches();
            return Err(Error::InvalidArgument(format!("loss diverged to {loss}")));
        }
        self.backward(labels)?;
        self.sgd_step(lr, momentum)?;
        Ok(loss)
    }

    pub fn clear_caches(&mut self) {
        for l in &mut self.layers {
            l.clear_cache();
        }
    }

    /// Mutable access to the parameters of layer `index`, by name.
    pub fn param_mut(&mut self, index: usize, name: &str) -> Option<&mut super::Param> {
        self.layers
            .get_mut(index)?
            .params_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, p)| p)
    }

    pub fn param(&self, index: usize, name: &str) -> Option<&super::Param> {
        self.layers
            .get(index)?
            .params()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, p)| p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ConvGeometry;
    use crate::qmath::QuantSpec;
    use rand::Rng;

    fn mlp() -> Network {
        Network::new(
            &[6],
            vec![
                LayerSpec::Fc { inputs: 6, units: 5, bias: true },
                LayerSpec::Tanh,
                LayerSpec::Fc { inputs: 5, units: 3, bias: true },
                LayerSpec::SoftmaxCe,
            ],
            1,
        )
        .unwrap()
    }

    fn input(b: usize, n: usize, seed: u64) -> TensorF32 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TensorF32::new([b, n], (0..b * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn rejects_missing_or_misplaced_softmax() {
        assert!(Network::new(&[4], vec![LayerSpec::Tanh], 0).is_err());
        assert!(Network::new(&[4], vec![LayerSpec::SoftmaxCe, LayerSpec::Tanh], 0).is_err());
        assert!(Network::new(&[4], vec![LayerSpec::Fc { inputs: 5, units: 2, bias: true }, LayerSpec::SoftmaxCe], 0).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let mut net = mlp();
        let before = net.param(0, "weight").unwrap().value.clone();
        net.train_batch(&input(4, 6, 2), &[0, 1, 2, 0], 0.0, 0.9).unwrap();
        assert_eq!(net.param(0, "weight").unwrap().value, before);
    }

    #[test]
    fn plain_sgd_step_is_exact() {
        let mut net = mlp();
        let x = input(4, 6, 3);
        net.forward_train(&x).unwrap();
        net.backward(&[2, 1, 0, 0]).unwrap();
        let w = net.param(2, "weight").unwrap().value.clone();
        let g = net.param(2, "weight").unwrap().grad.clone();
        net.sgd_step(0.05, 0.0).unwrap();
        let after = net.param(2, "weight").unwrap().value.data().to_vec();
        for ((a, w), g) in after.iter().zip(w.data()).zip(&g) {
            assert_eq!(*a, w - 0.05 * g);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut net = mlp();
        net.forward_train(&input(2, 6, 4)).unwrap();
        net.backward(&[0, 1]).unwrap();
        net.param_mut(2, "bias").unwrap().grad[1] = f32::NAN;
        let before = net.param(0, "weight").unwrap().value.clone();
        assert!(matches!(
            net.sgd_step(0.1, 0.9),
            Err(Error::NonFiniteGradient { layer: 2, param: "bias" })
        ));
        assert_eq!(net.param(0, "weight").unwrap().value, before);
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut net = mlp();
        assert!(net.backward(&[0]).is_err());
        net.forward_train(&input(1, 6, 5)).unwrap();
        net.backward(&[0]).unwrap();
        assert!(net.backward(&[0]).is_err());
    }

    #[test]
    fn packed_inference_requires_packing() {
        let mut net = Network::new(
            &[1, 6, 6],
            vec![
                LayerSpec::Conv { geom: ConvGeometry::new(1, 2, (3, 3)), bias: true },
                LayerSpec::QActivation { act_bit: QuantSpec::BINARY },
                LayerSpec::QConv { geom: ConvGeometry::new(2, 3, (3, 3)), act_bit: QuantSpec::BINARY },
                LayerSpec::batchnorm(3),
                LayerSpec::Fc { inputs: 12, units: 4, bias: true },
                LayerSpec::SoftmaxCe,
            ],
            9,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = TensorF32::new([2, 1, 6, 6], (0..72).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        assert!(net.infer(&x, Mode::InferPacked).is_err());
        net.prepare_packed();
        assert!(net.is_packed());
        let a = net.infer(&x, Mode::InferFloat).unwrap();
        let b = net.infer(&x, Mode::InferPacked).unwrap();
        assert_eq!(a, b);
        assert!(net.has_full_precision_ends());
        assert_eq!(net.binary_layers(), vec![2]);
        // an update invalidates the packed cache
        net.train_batch(&x, &[0, 3], 0.1, 0.0).unwrap();
        assert!(!net.is_packed());
    }

    #[test]
    fn input_shape_checked() {
        let net = mlp();
        assert!(net.infer(&input(2, 5, 1), Mode::InferFloat).is_err());
        let mut bad = input(1, 6, 1);
        bad.data_mut()[0] = f32::NAN;
        assert!(net.infer(&bad, Mode::InferFloat).is_err());
    }
}
