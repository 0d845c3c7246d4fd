//! Convolution and fully connected layers, full precision or quantized.

use std::borrow::Cow;

use rand::Rng;

use super::{glorot_limit, stale_cache, ConvGeometry, LayerSpec, Mode, Param};
use crate::bitpack::{pack_signs, words_for, BitMatrix, WordLayout, B_PAD_FILL};
use crate::error::{Error, Result};
use crate::gemm::{xnor_gemm_counts, GemmDims, GemmOptions, KernelId};
use crate::qmath::{quantize_signed, ste_backward, QuantSpec};
use crate::tensor::{col2im, im2col, matmul, TensorF32, Trans};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Conv(ConvGeometry),
    Fc { inputs: usize, units: usize },
}

#[derive(Debug, Clone)]
struct Cache {
    input_dims: Vec<usize>,
    /// im2col patches `[K, N]` for conv, flattened input `[B, K]` for fc.
    operand: Vec<f32>,
    /// Weights as used in the forward pass (quantized for Q layers).
    effective: Vec<f32>,
}

/// GEMM-backed layer: `Conv`, `QConv`, `Fc` or `QFc`.
///
/// The weight matrix is `[rows, K]` with `rows` = filters (units) and
/// `K` = `in_c·kh·kw` (inputs); a conv weight tensor `[F, C, kh, kw]` is that
/// matrix row-major.
#[derive(Debug, Clone)]
pub struct Linear {
    kind: Kind,
    quant: Option<QuantSpec>,
    pub(crate) weight: Param,
    pub(crate) bias: Option<Param>,
    /// `binarize(weight)` packed as the GEMM left operand; binary layers only.
    pub(crate) packed: Option<BitMatrix>,
    cache: Option<Cache>,
}

impl Linear {
    pub(crate) fn new(spec: &LayerSpec, input: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let (kind, quant, has_bias) = match *spec {
            LayerSpec::Conv { geom, bias } => (Kind::Conv(geom), None, bias),
            LayerSpec::QConv { geom, act_bit } => {
                if act_bit.is_binary() && geom.pad != (0, 0) {
                    return Err(Error::InvalidArgument(
                        "binary convolution requires zero padding width (pad values are not ±1)".into(),
                    ));
                }
                (Kind::Conv(geom), Some(act_bit), false)
            }
            LayerSpec::Fc { inputs, units, bias } => (Kind::Fc { inputs, units }, None, bias),
            LayerSpec::QFc { inputs, units, act_bit } => (Kind::Fc { inputs, units }, Some(act_bit), false),
            _ => unreachable!("not a linear layer spec"),
        };
        super::Layer::output_dims(spec, input)?;
        let (dims, fan_in, fan_out) = match kind {
            Kind::Conv(g) => (
                vec![g.filters, g.in_channels, g.kernel.0, g.kernel.1],
                g.fan_in(),
                g.filters * g.kernel.0 * g.kernel.1,
            ),
            Kind::Fc { inputs, units } => (vec![units, inputs], inputs, units),
        };
        let rows = dims[0];
        let weight = Param::uniform(dims, glorot_limit(fan_in, fan_out), rng)?;
        let bias = if has_bias {
            Some(Param::new(TensorF32::zeros([rows])?))
        } else {
            None
        };
        Ok(Linear {
            kind,
            quant,
            weight,
            bias,
            packed: None,
            cache: None,
        })
    }

    pub fn is_binary(&self) -> bool {
        self.quant.is_some_and(QuantSpec::is_binary)
    }

    pub fn quant(&self) -> Option<QuantSpec> {
        self.quant
    }

    /// Output channels / units.
    pub fn rows(&self) -> usize {
        self.weight.value.dims()[0]
    }

    /// Reduction length K.
    pub fn fan_in(&self) -> usize {
        self.weight.value.item_len()
    }

    pub fn weight(&self) -> &TensorF32 {
        &self.weight.value
    }

    pub fn bias(&self) -> Option<&TensorF32> {
        self.bias.as_ref().map(|b| &b.value)
    }

    pub fn packed_weight(&self) -> Option<&BitMatrix> {
        self.packed.as_ref()
    }

    pub(crate) fn params(&self) -> Vec<(&'static str, &Param)> {
        let mut v = vec![("weight", &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias", b));
        }
        v
    }

    pub(crate) fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        let mut v = vec![("weight", &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push(("bias", b));
        }
        v
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Packs `binarize(weight)`; no-op for non-binary layers.
    pub(crate) fn refresh_packed(&mut self) {
        if self.is_binary() {
            let rows = self.rows();
            let k = self.fan_in();
            self.packed = Some(BitMatrix::pack_a_signs(self.weight.value.data(), rows, k));
        }
    }

    /// Installs packed weights loaded from a file; the float weights become
    /// their ±1 expansion so both inference modes stay consistent.
    pub(crate) fn install_packed(&mut self, packed: BitMatrix) -> Result<()> {
        if !self.is_binary() {
            return Err(Error::InvalidArgument("packed weights on a non-binary layer".into()));
        }
        if packed.vectors() != self.rows() || packed.k() != self.fan_in() {
            return Err(Error::shape(format!(
                "packed weight {}x{} does not fit layer {}x{}",
                packed.vectors(),
                packed.k(),
                self.rows(),
                self.fan_in()
            )));
        }
        let data: Vec<f32> = (0..packed.vectors()).flat_map(|r| packed.unpack_vector(r)).collect();
        self.weight.value.data_mut().copy_from_slice(&data);
        self.packed = Some(packed);
        Ok(())
    }

    fn effective_weight(&self) -> Cow<'_, [f32]> {
        match self.quant {
            None => Cow::Borrowed(self.weight.value.data()),
            Some(q) => Cow::Owned(self.weight.value.data().iter().map(|&w| quantize_signed(w, q)).collect()),
        }
    }

    fn check_binary_input(&self, x: &[f32]) {
        if cfg!(debug_assertions) && self.is_binary() {
            assert!(
                x.iter().all(|&v| v == 1.0 || v == -1.0),
                "binary layer input must be ±1; put a QActivation in front"
            );
        }
    }

    /// Float GEMM part of the forward pass: `[rows, N]` for conv, `[B, rows]`
    /// for fc, with the popcount mapping applied for binary layers.
    fn float_product(&self, operand: &[f32], weff: &[f32], batch: usize, ncols: usize) -> Vec<f32> {
        let rows = self.rows();
        let k = self.fan_in();
        let mut out = match self.kind {
            Kind::Conv(_) => {
                let mut out = vec![0.0; rows * ncols];
                matmul(rows, ncols, k, weff, Trans::No, operand, Trans::No, &mut out, false);
                out
            }
            Kind::Fc { .. } => {
                let mut out = vec![0.0; batch * rows];
                matmul(batch, rows, k, operand, Trans::No, weff, Trans::Yes, &mut out, false);
                out
            }
        };
        if self.is_binary() {
            let kf = k as f32;
            for v in &mut out {
                *v = (*v + kf) / 2.0;
            }
        }
        out
    }

    fn add_bias(&self, out: &mut [f32], batch: usize, ncols: usize) {
        let Some(bias) = &self.bias else { return };
        let b = bias.value.data();
        match self.kind {
            Kind::Conv(_) => {
                for (row, &bv) in out.chunks_mut(ncols).zip(b) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
            Kind::Fc { .. } => {
                for row in out.chunks_mut(b.len()).take(batch) {
                    row.iter_mut().zip(b).for_each(|(v, &bv)| *v += bv);
                }
            }
        }
    }

    fn lower(&self, x: &TensorF32) -> Result<(Vec<f32>, usize, Vec<usize>)> {
        match self.kind {
            Kind::Conv(g) => {
                let cols = im2col(x, &g.window())?;
                let (_, oh, ow) = conv_out(g, x.dims())?;
                let n = cols.dims()[1];
                Ok((cols.into_data(), n, vec![x.batch(), g.filters, oh, ow]))
            }
            Kind::Fc { inputs, units } => {
                if x.item_len() != inputs {
                    return Err(Error::shape(format!(
                        "fully connected layer expects {inputs} inputs per item, got {:?}",
                        x.dims()
                    )));
                }
                Ok((x.data().to_vec(), x.batch(), vec![x.batch(), units]))
            }
        }
    }

    fn finish(&self, mut out: Vec<f32>, batch: usize, ncols: usize, out_dims: Vec<usize>) -> Result<TensorF32> {
        self.add_bias(&mut out, batch, ncols);
        let out = match self.kind {
            Kind::Conv(_) => rows_to_nchw(&out, self.rows(), batch),
            Kind::Fc { .. } => out,
        };
        TensorF32::new(out_dims, out)
    }

    pub(crate) fn forward_infer(&self, x: &TensorF32, mode: Mode, workers: usize) -> Result<TensorF32> {
        let batch = x.batch();
        let (operand, ncols, out_dims) = self.lower(x)?;
        self.check_binary_input(&operand);
        if mode == Mode::InferPacked && self.quant.is_some() {
            let out = self.packed_product(&operand, batch, ncols, workers)?;
            return self.finish(out, batch, ncols, out_dims);
        }
        let weff = self.effective_weight();
        let out = self.float_product(&operand, &weff, batch, ncols);
        self.finish(out, batch, ncols, out_dims)
    }

    fn packed_product(&self, operand: &[f32], batch: usize, ncols: usize, workers: usize) -> Result<Vec<f32>> {
        if !self.is_binary() {
            return Err(Error::InvalidArgument(format!(
                "packed inference needs act_bit 1, layer has {}",
                self.quant.map_or(32, QuantSpec::bits)
            )));
        }
        let weights = self
            .packed
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("packed inference without packed weights".into()))?;
        let k = self.fan_in();
        let rows = self.rows();
        let opts = GemmOptions::with_workers(workers.max(1));
        match self.kind {
            Kind::Conv(_) => {
                let pb = BitMatrix::pack_b_signs(operand, k, ncols);
                let dims = GemmDims::new(rows, ncols, k)?;
                let counts = xnor_gemm_counts(KernelId::XnorParallel, weights, &pb, dims, &opts)?;
                Ok(counts.into_iter().map(|c| c as f32).collect())
            }
            Kind::Fc { .. } => {
                let pb = pack_b_from_rows(operand, batch, k)?;
                let dims = GemmDims::new(rows, batch, k)?;
                let counts = xnor_gemm_counts(KernelId::XnorParallel, weights, &pb, dims, &opts)?;
                // [units, batch] -> [batch, units]
                let mut out = vec![0.0; batch * rows];
                for u in 0..rows {
                    for b in 0..batch {
                        out[b * rows + u] = counts[u * batch + b] as f32;
                    }
                }
                Ok(out)
            }
        }
    }

    pub(crate) fn forward_train(&mut self, x: &TensorF32) -> Result<TensorF32> {
        let batch = x.batch();
        let (operand, ncols, out_dims) = self.lower(x)?;
        self.check_binary_input(&operand);
        let weff = self.effective_weight().into_owned();
        let out = self.float_product(&operand, &weff, batch, ncols);
        let y = self.finish(out, batch, ncols, out_dims)?;
        self.cache = Some(Cache {
            input_dims: x.dims().to_vec(),
            operand,
            effective: weff,
        });
        Ok(y)
    }

    pub(crate) fn backward(&mut self, grad: &TensorF32, need_input_grad: bool) -> Result<Option<TensorF32>> {
        let cache = self.cache.take().ok_or_else(|| stale_cache("linear"))?;
        let rows = self.rows();
        let k = self.fan_in();
        let batch = cache.input_dims[0];
        let scale = if self.is_binary() { 0.5 } else { 1.0 };

        // gradient w.r.t. the GEMM output, in GEMM layout
        let g: Vec<f32> = match self.kind {
            Kind::Conv(_) => nchw_to_rows(grad.data(), rows, batch),
            Kind::Fc { .. } => grad.data().to_vec(),
        }
        .into_iter()
        .map(|v| v * scale)
        .collect();
        let ncols = g.len() / rows;

        let mut dweff = vec![0.0; rows * k];
        match self.kind {
            Kind::Conv(_) => matmul(rows, k, ncols, &g, Trans::No, &cache.operand, Trans::Yes, &mut dweff, false),
            Kind::Fc { .. } => matmul(rows, k, batch, &g, Trans::Yes, &cache.operand, Trans::No, &mut dweff, false),
        }
        if self.quant.is_some() {
            for (d, &w) in dweff.iter_mut().zip(self.weight.value.data()) {
                *d = ste_backward(*d, w);
            }
        }
        self.weight.grad = dweff;

        if let Some(bias) = &mut self.bias {
            let db = &mut bias.grad;
            db.fill(0.0);
            match self.kind {
                Kind::Conv(_) => {
                    for (r, row) in g.chunks(ncols).enumerate() {
                        db[r] = row.iter().sum();
                    }
                }
                Kind::Fc { .. } => {
                    for row in g.chunks(rows) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
        }

        if !need_input_grad {
            return Ok(None);
        }
        let dx = match self.kind {
            Kind::Conv(geom) => {
                let mut dcols = vec![0.0; k * ncols];
                matmul(k, ncols, rows, &cache.effective, Trans::Yes, &g, Trans::No, &mut dcols, false);
                let d = &cache.input_dims;
                col2im(&TensorF32::new([k, ncols], dcols)?, [d[0], d[1], d[2], d[3]], &geom.window())?
            }
            Kind::Fc { .. } => {
                let mut dx = vec![0.0; batch * k];
                matmul(batch, k, rows, &g, Trans::No, &cache.effective, Trans::No, &mut dx, false);
                TensorF32::new(cache.input_dims.clone(), dx)?
            }
        };
        Ok(Some(dx))
    }
}

fn conv_out(g: ConvGeometry, dims: &[usize]) -> Result<(usize, usize, usize)> {
    let &[_, c, h, w] = dims else {
        return Err(Error::shape(format!("convolution needs [batch, c, h, w], got {dims:?}")));
    };
    if c != g.in_channels {
        return Err(Error::shape(format!("convolution expects {} channels, got {c}", g.in_channels)));
    }
    let (oh, ow) = g.window().output_hw(h, w)?;
    Ok((g.filters, oh, ow))
}

/// `[F, B·P]` → `[B, F, P]`.
fn rows_to_nchw(data: &[f32], filters: usize, batch: usize) -> Vec<f32> {
    let p = data.len() / (filters * batch);
    let mut out = vec![0.0; data.len()];
    for f in 0..filters {
        for b in 0..batch {
            let src = &data[f * batch * p + b * p..][..p];
            out[(b * filters + f) * p..][..p].copy_from_slice(src);
        }
    }
    out
}

/// `[B, F, P]` → `[F, B·P]`.
fn nchw_to_rows(data: &[f32], filters: usize, batch: usize) -> Vec<f32> {
    let p = data.len() / (filters * batch);
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        for f in 0..filters {
            let src = &data[(b * filters + f) * p..][..p];
            out[f * batch * p + b * p..][..p].copy_from_slice(src);
        }
    }
    out
}

/// Right-operand packing of `[N, K]` rows, i.e. of their transpose `[K, N]`.
fn pack_b_from_rows(rows: &[f32], n: usize, k: usize) -> Result<BitMatrix> {
    let wpv = words_for(k);
    let mut words = vec![0u64; wpv * n];
    for (col, row) in rows.chunks(k).enumerate() {
        for (w, word) in pack_signs(row, B_PAD_FILL).into_iter().enumerate() {
            words[w * n + col] = word;
        }
    }
    BitMatrix::from_words(n, k, WordLayout::WordMajor, B_PAD_FILL, words)
}
