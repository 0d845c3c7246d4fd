//! k-bit linear quantization, the dot/xnor range mapping, and the clipped
//! straight-through gradient.

use crate::bitpack::binarize;
use crate::error::{Error, Result};

/// Bit width a quantized layer computes with. `1` selects sign binarization,
/// `2..=31` the linear grid. Ties round half away from zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantSpec {
    bits: u8,
}

impl QuantSpec {
    pub const BINARY: QuantSpec = QuantSpec { bits: 1 };

    pub fn new(bits: u32) -> Result<Self> {
        if !(1..=31).contains(&bits) {
            return Err(Error::InvalidArgument(format!(
                "bit width {bits} outside 1..=31"
            )));
        }
        Ok(QuantSpec { bits: bits as u8 })
    }

    pub fn bits(self) -> u32 {
        self.bits as u32
    }

    pub fn is_binary(self) -> bool {
        self.bits == 1
    }

    /// Number of grid steps, `2^k − 1`.
    pub fn levels(self) -> f64 {
        ((1u64 << self.bits) - 1) as f64
    }
}

/// `round((2^k − 1)·x) / (2^k − 1)` for `x ∈ [0,1]`, `k ∈ 2..=31`.
///
/// Evaluated in `f64`; the grid is only exactly representable in the `f32`
/// result for small `k` (idempotence holds up to about `k = 20`).
pub fn quantize(input: f32, k: u32) -> Result<f32> {
    if !(2..=31).contains(&k) {
        return Err(Error::InvalidArgument(format!(
            "quantize bit width {k} outside 2..=31"
        )));
    }
    if !(0.0..=1.0).contains(&input) {
        return Err(Error::InvalidArgument(format!(
            "quantize input {input} outside [0, 1]"
        )));
    }
    Ok(quantize_unit(input as f64, QuantSpec { bits: k as u8 }) as f32)
}

#[inline]
fn quantize_unit(x: f64, spec: QuantSpec) -> f64 {
    let levels = spec.levels();
    // f64::round rounds half away from zero
    (levels * x).round() / levels
}

/// Quantizes a signed value: clamp to `[−1,1]`, then sign for `k = 1`, or the
/// affine round trip through the `[0,1]` grid for `k > 1`.
#[inline]
pub fn quantize_signed(input: f32, spec: QuantSpec) -> f32 {
    debug_assert!(input.is_finite(), "quantize_signed on non-finite {input}");
    let x = input.clamp(-1.0, 1.0);
    if spec.is_binary() {
        return binarize(x);
    }
    let unit = (x as f64 + 1.0) / 2.0;
    (2.0 * quantize_unit(unit, spec) - 1.0) as f32
}

/// Maps a ±1 dot product over `n` terms into the popcount domain:
/// `(dot + n) / 2`.
pub fn map_dot_to_xnor(output_dot: f32, n: usize) -> Result<f32> {
    let nf = n as f32;
    if !(-nf..=nf).contains(&output_dot) {
        return Err(Error::InvalidArgument(format!(
            "dot product {output_dot} outside [-{n}, {n}]"
        )));
    }
    Ok((output_dot + nf) / 2.0)
}

/// Inverse of [`map_dot_to_xnor`]: `2x − n`.
#[inline]
pub fn xnor_to_dot(popcount: f32, n: usize) -> f32 {
    2.0 * popcount - n as f32
}

/// Clipped straight-through estimator: passes the gradient where
/// `|x| ≤ 1`, zero elsewhere.
#[inline]
pub fn ste_backward(upstream_grad: f32, pre_activation_input: f32) -> f32 {
    if pre_activation_input.abs() <= 1.0 {
        upstream_grad
    } else {
        0.0
    }
}
