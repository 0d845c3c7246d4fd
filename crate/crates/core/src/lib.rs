//! Binary neural networks on bit-packed weights.
//!
//! ±1 values are packed 64 to a machine word ([`bitpack`]), matrix products
//! run as xnor + popcount ([`gemm`]), and quantized layers ([`layers`]) have a
//! float forward pass that matches the packed one exactly, so a network
//! trained in float can be converted ([`modelio`]) and served from 1-bit
//! weights.

pub mod bitpack;
pub mod error;
pub mod gemm;
pub mod layers;
pub mod modelio;
pub mod qmath;
pub mod tensor;

pub use error::{Error, Result};
