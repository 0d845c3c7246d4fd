//! Dense row-major `f32` tensors, the im2col lowering, and the float GEMMs.
//!
//! [`gemm_f32`] is the plain triple loop used as the reference kernel and the
//! benchmark baseline. [`matmul`] is the cache-blocked float GEMM the training
//! path runs on; it is only ever used where the result is either an exact
//! integer or compared with a tolerance.

use std::fmt;

use crate::error::{Error, Result};

/// Extent of every axis of a tensor.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::shape("shape must have at least one axis"));
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(Error::shape(format!("axis {axis} of {dims:?} is zero")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::shape(format!("element count of {dims:?} overflows")))?;
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Clone, PartialEq)]
pub struct TensorF32 {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for TensorF32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TensorF32")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl TensorF32 {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                shape.numel(),
                data.len()
            )));
        }
        Ok(TensorF32 { shape, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![0.0; shape.numel()];
        Ok(TensorF32 { shape, data })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: f32) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        t.data.fill(value);
        Ok(t)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros([n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        TensorF32::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> TensorF32 {
        TensorF32 {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Leading axis, i.e. the batch size for activations.
    pub fn batch(&self) -> usize {
        self.dims()[0]
    }

    /// Element count of one item along the leading axis.
    pub fn item_len(&self) -> usize {
        self.dims()[1..].iter().product()
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<TensorF32> {
        if start >= end || end > self.batch() {
            return Err(Error::shape(format!(
                "batch range {start}..{end} outside 0..{}",
                self.batch()
            )));
        }
        let item = self.item_len();
        let mut dims = self.dims().to_vec();
        dims[0] = end - start;
        TensorF32::new(dims, self.data[start * item..end * item].to_vec())
    }

    pub fn transpose2(&self) -> Result<TensorF32> {
        let (rows, cols) = self.matrix_dims()?;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.data[r * cols + c];
            }
        }
        TensorF32::new([cols, rows], out)
    }

    pub(crate) fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.dims() {
            &[r, c] => Ok((r, c)),
            d => Err(Error::shape(format!("expected a matrix, got shape {d:?}"))),
        }
    }
}

/// Geometry of a 2-D convolution window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Window {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        Window {
            kernel,
            stride,
            pad,
        }
    }

    /// Output spatial extent for an `h`×`w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.pad;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::shape(format!(
                "kernel {:?} and stride {:?} must be positive",
                self.kernel, self.stride
            )));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::shape(format!(
                "kernel {:?} larger than padded input {}x{}",
                self.kernel,
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }
}

fn nchw(t: &TensorF32) -> Result<(usize, usize, usize, usize)> {
    match t.dims() {
        &[b, c, h, w] => Ok((b, c, h, w)),
        d => Err(Error::shape(format!("expected [batch, c, h, w], got {d:?}"))),
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + k − pad` lies
/// inside `0..width`.
fn valid_span(out_w: usize, width: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if width + pad > k {
        (width + pad - k).div_ceil(stride).min(out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Lowers a `[batch, in_c, h, w]` input to the `[in_c·kh·kw, batch·out_h·out_w]`
/// patch matrix. Rows are ordered `(channel, ky, kx)`; column `j` is output
/// position `j` in `(batch, oy, ox)` order. Padding reads as `0.0`.
pub fn im2col(input: &TensorF32, window: &Window) -> Result<TensorF32> {
    let (batch, channels, h, w) = nchw(input)?;
    let (oh, ow) = window.output_hw(h, w)?;
    let (kh, kw) = window.kernel;
    let (sh, sw) = window.stride;
    let (ph, pw) = window.pad;
    let rows = channels * kh * kw;
    let cols = batch * oh * ow;
    let mut out = vec![0.0f32; rows * cols];
    let src = input.data();

    for c in 0..channels {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for b in 0..batch {
                    let plane = &src[(b * channels + c) * h * w..(b * channels + c + 1) * h * w];
                    for oy in 0..oh {
                        let y = (oy * sh + ky) as isize - ph as isize;
                        let base = (b * oh + oy) * ow;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let line = &plane[y as usize * w..(y as usize + 1) * w];
                        let (lo, hi) = valid_span(ow, w, sw, kx, pw);
                        let x0 = lo * sw + kx - pw;
                        if sw == 1 {
                            dst[base + lo..base + hi].copy_from_slice(&line[x0..x0 + hi - lo]);
                        } else {
                            for (i, ox) in (lo..hi).enumerate() {
                                dst[base + ox] = line[x0 + i * sw];
                            }
                        }
                    }
                }
            }
        }
    }
    TensorF32::new([rows, cols], out)
}

/// Adjoint of [`im2col`]: scatters a patch-matrix gradient back onto the
/// `[batch, channels, h, w]` input grid, summing overlapping windows.
pub fn col2im(
    cols: &TensorF32,
    input_dims: [usize; 4],
    window: &Window,
) -> Result<TensorF32> {
    let [batch, channels, h, w] = input_dims;
    let (oh, ow) = window.output_hw(h, w)?;
    let (kh, kw) = window.kernel;
    let (sh, sw) = window.stride;
    let (ph, pw) = window.pad;
    let ncols = batch * oh * ow;
    if cols.dims() != [channels * kh * kw, ncols] {
        return Err(Error::shape(format!(
            "col2im: patch matrix {:?} does not match input {:?}",
            cols.dims(),
            input_dims
        )));
    }
    let mut out = vec![0.0f32; batch * channels * h * w];
    let src = cols.data();

    for c in 0..channels {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let line_src = &src[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let plane_off = (b * channels + c) * h * w;
                    for oy in 0..oh {
                        let y = (oy * sh + ky) as isize - ph as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let base = (b * oh + oy) * ow;
                        let (lo, hi) = valid_span(ow, w, sw, kx, pw);
                        let start = plane_off + y as usize * w + lo * sw + kx - pw;
                        let src_row = &line_src[base + lo..base + hi];
                        if sw == 1 {
                            let dst = &mut out[start..start + src_row.len()];
                            dst.iter_mut().zip(src_row).for_each(|(d, &g)| *d += g);
                        } else {
                            for (i, &g) in src_row.iter().enumerate() {
                                out[start + i * sw] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    TensorF32::new(input_dims.to_vec(), out)
}

/// Reference float GEMM: `C[m,n] = Σ_k A[m,k]·B[k,n]`, loop order m→k→n,
/// accumulated in `f32`.
pub fn gemm_f32(a: &TensorF32, b: &TensorF32) -> Result<TensorF32> {
    let (m, k) = a.matrix_dims()?;
    let (kb, n) = b.matrix_dims()?;
    if k != kb {
        return Err(Error::shape(format!(
            "gemm inner dims differ: [{m}, {k}] x [{kb}, {n}]"
        )));
    }
    let mut c = vec![0.0f32; m * n];
    gemm_f32_raw(m, n, k, a.data(), b.data(), &mut c);
    TensorF32::new([m, n], c)
}

/// Slice form of [`gemm_f32`]; `c` is overwritten.
pub fn gemm_f32_raw(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    c.fill(0.0);
    for mi in 0..m {
        let c_row = &mut c[mi * n..(mi + 1) * n];
        for ki in 0..k {
            let a_mk = a[mi * k + ki];
            let b_row = &b[ki * n..(ki + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_mk * bv;
            }
        }
    }
}

/// Operand orientation for [`matmul`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// Blocked float GEMM `C = op(A)·op(B) (+ C if accumulate)` over raw row-major
/// slices, where `op` optionally transposes. `a` is stored `[m,k]` (or `[k,m]`
/// when transposed), `b` likewise `[k,n]` (or `[n,k]`).
#[allow(clippy::too_many_arguments)]
pub fn matmul(
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    ta: Trans,
    b: &[f32],
    tb: Trans,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "matmul: lhs length");
    assert_eq!(b.len(), k * n, "matmul: rhs length");
    assert_eq!(c.len(), m * n, "matmul: output length");
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
