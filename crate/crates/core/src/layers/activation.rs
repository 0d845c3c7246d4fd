use super::stale_cache;
use crate::error::Result;
use crate::qmath::{quantize_signed, ste_backward, QuantSpec};
use crate::tensor::TensorF32;

/// Quantizes its input to `act_bit` bits; `act_bit = 1` gives ±1.
#[derive(Debug, Clone)]
pub struct QActivation {
    pub spec: QuantSpec,
    pub(crate) cache: Option<TensorF32>,
}

impl QActivation {
    pub fn new(spec: QuantSpec) -> Self {
        QActivation { spec, cache: None }
    }

    pub fn forward(&self, x: &TensorF32) -> TensorF32 {
        let spec = self.spec;
        x.map(|v| quantize_signed(v, spec))
    }

    pub(crate) fn forward_train(&mut self, x: &TensorF32) -> TensorF32 {
        self.cache = Some(x.clone());
        self.forward(x)
    }

    /// Straight-through: pass where `|x| ≤ 1`.
    pub(crate) fn backward(&mut self, grad: &TensorF32) -> Result<TensorF32> {
        let x = self.cache.take().ok_or_else(|| stale_cache("qactivation"))?;
        let data = grad.data().iter().zip(x.data()).map(|(&g, &v)| ste_backward(g, v)).collect();
        TensorF32::new(x.dims().to_vec(), data)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tanh {
    pub(crate) cache: Option<TensorF32>,
}

impl Tanh {
    pub(crate) fn forward_train(&mut self, x: &TensorF32) -> TensorF32 {
        let y = x.map(f32::tanh);
        self.cache = Some(y.clone());
        y
    }

    pub(crate) fn backward(&mut self, grad: &TensorF32) -> Result<TensorF32> {
        let y = self.cache.take().ok_or_else(|| stale_cache("tanh"))?;
        let data = grad.data().iter().zip(y.data()).map(|(&g, &t)| g * (1.0 - t * t)).collect();
        TensorF32::new(y.dims().to_vec(), data)
    }
}
