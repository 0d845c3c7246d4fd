//! Sign binarization and 64-bit word packing of ±1 values.
//!
//! Word layout: bit `i` (LSB first) of a word holds element `i` of a
//! 64-element span, with `1 ↔ +1` and `0 ↔ −1`. The GEMM left operand pads
//! the tail of each packed vector with `0`, the right operand with `1`, so a
//! pad pair always xnors to `0` and contributes nothing to a popcount.

use crate::error::{Error, Result};
use crate::tensor::TensorF32;

pub const WORD_BITS: usize = 64;

/// Pad bit of the GEMM left operand (weights).
pub const A_PAD_FILL: bool = false;
/// Pad bit of the GEMM right operand (activations).
pub const B_PAD_FILL: bool = true;

/// Sign with `sign(0) = +1`.
#[inline]
pub fn binarize(x: f32) -> f32 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[inline]
pub fn sign_bit(x: f32) -> bool {
    x >= 0.0
}

#[inline]
pub fn words_for(len: usize) -> usize {
    len.div_ceil(WORD_BITS)
}

/// Mask of the bits beyond `len` in the last word of a `len`-element span.
#[inline]
pub fn tail_mask(len: usize) -> u64 {
    match len % WORD_BITS {
        0 => 0,
        r => !0u64 << r,
    }
}

fn check_binary(values: &[f32]) -> Result<()> {
    match values.iter().position(|&v| v != 1.0 && v != -1.0) {
        Some(index) => Err(Error::NotBinary {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

/// Packs a ±1 vector LSB-first; tail bits take `pad_fill`.
pub fn pack_row(values: &[f32], pad_fill: bool) -> Result<Vec<u64>> {
    check_binary(values)?;
    Ok(pack_signs(values, pad_fill))
}

/// Packs `sign(v)` for arbitrary finite values; no ±1 check.
pub fn pack_signs(values: &[f32], pad_fill: bool) -> Vec<u64> {
    let mut words = vec![0u64; words_for(values.len())];
    for (word, chunk) in words.iter_mut().zip(values.chunks(WORD_BITS)) {
        let mut acc = 0u64;
        for (i, &v) in chunk.iter().enumerate() {
            acc |= (sign_bit(v) as u64) << i;
        }
        *word = acc;
    }
    if pad_fill {
        if let Some(last) = words.last_mut() {
            *last |= tail_mask(values.len());
        }
    }
    words
}

pub fn unpack_row(words: &[u64], len: usize) -> Vec<f32> {
    (0..len)
        .map(|i| {
            if (words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

/// How the words of a [`BitMatrix`] are laid out in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordLayout {
    /// Vector `v`, word `w` at `v·words_per_vector + w` (GEMM left operand).
    VectorMajor,
    /// Vector `v`, word `w` at `w·vectors + v` (GEMM right operand).
    WordMajor,
}

/// A set of `vectors` packed ±1 vectors of logical length `k`.
///
/// As a GEMM left operand `[M,K]` the vectors are the M rows; as a right
/// operand `[K,N]` they are the N columns. Immutable once built; every
/// constructor audits the tail padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    vectors: usize,
    k: usize,
    words_per_vector: usize,
    layout: WordLayout,
    pad_fill: bool,
    words: Vec<u64>,
}

impl BitMatrix {
    /// Builds from raw words, rejecting wrong lengths and bad tail bits.
    pub fn from_words(
        vectors: usize,
        k: usize,
        layout: WordLayout,
        pad_fill: bool,
        words: Vec<u64>,
    ) -> Result<Self> {
        if vectors == 0 || k == 0 {
            return Err(Error::shape(format!("bit matrix {vectors}x{k} is empty")));
        }
        let words_per_vector = words_for(k);
        if words.len() != vectors * words_per_vector {
            return Err(Error::shape(format!(
                "bit matrix {vectors}x{k} needs {} words, got {}",
                vectors * words_per_vector,
                words.len()
            )));
        }
        let m = BitMatrix {
            vectors,
            k,
            words_per_vector,
            layout,
            pad_fill,
            words,
        };
        m.audit()?;
        Ok(m)
    }

    /// Left-operand packing of a ±1 matrix `[M,K]`: each row along K, pad 0.
    pub fn pack_a(m: &TensorF32) -> Result<Self> {
        check_binary(m.data())?;
        let (rows, k) = m.matrix_dims()?;
        Ok(Self::pack_a_signs(m.data(), rows, k))
    }

    /// Right-operand packing of a ±1 matrix `[K,N]`: each column along K, pad 1.
    pub fn pack_b(m: &TensorF32) -> Result<Self> {
        check_binary(m.data())?;
        let (k, cols) = m.matrix_dims()?;
        Ok(Self::pack_b_signs(m.data(), k, cols))
    }

    /// [`BitMatrix::pack_a`] on `sign(x)` of arbitrary values.
    pub fn pack_a_signs(data: &[f32], rows: usize, k: usize) -> Self {
        assert_eq!(data.len(), rows * k);
        let wpv = words_for(k);
        let mut words = Vec::with_capacity(rows * wpv);
        for row in data.chunks(k) {
            words.extend(pack_signs(row, A_PAD_FILL));
        }
        BitMatrix {
            vectors: rows,
            k,
            words_per_vector: wpv,
            layout: WordLayout::VectorMajor,
            pad_fill: A_PAD_FILL,
            words,
        }
    }

    /// [`BitMatrix::pack_b`] on `sign(x)` of arbitrary values.
    pub fn pack_b_signs(data: &[f32], k: usize, cols: usize) -> Self {
        assert_eq!(data.len(), k * cols);
        let wpv = words_for(k);
        let mut words = vec![0u64; wpv * cols];
        for (ki, row) in data.chunks(cols).enumerate() {
            let bit = ki % WORD_BITS;
            let dst = &mut words[(ki / WORD_BITS) * cols..(ki / WORD_BITS + 1) * cols];
            for (w, &v) in dst.iter_mut().zip(row) {
                *w |= (sign_bit(v) as u64) << bit;
            }
        }
        let mask = tail_mask(k);
        if B_PAD_FILL && mask != 0 {
            for w in &mut words[(wpv - 1) * cols..] {
                *w |= mask;
            }
        }
        BitMatrix {
            vectors: cols,
            k,
            words_per_vector: wpv,
            layout: WordLayout::WordMajor,
            pad_fill: B_PAD_FILL,
            words,
        }
    }

    pub fn vectors(&self) -> usize {
        self.vectors
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn words_per_vector(&self) -> usize {
        self.words_per_vector
    }

    pub fn layout(&self) -> WordLayout {
        self.layout
    }

    pub fn pad_fill(&self) -> bool {
        self.pad_fill
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn into_words(self) -> Vec<u64> {
        self.words
    }

    /// Packed storage in bytes.
    pub fn byte_len(&self) -> usize {
        self.words.len() * 8
    }

    #[inline]
    pub fn word(&self, vector: usize, w: usize) -> u64 {
        match self.layout {
            WordLayout::VectorMajor => self.words[vector * self.words_per_vector + w],
            WordLayout::WordMajor => self.words[w * self.vectors + vector],
        }
    }

    pub fn vector_words(&self, vector: usize) -> Vec<u64> {
        (0..self.words_per_vector).map(|w| self.word(vector, w)).collect()
    }

    pub fn unpack_vector(&self, vector: usize) -> Vec<f32> {
        unpack_row(&self.vector_words(vector), self.k)
    }

    /// Checks that every tail bit beyond `k` equals the pad fill.
    pub fn audit(&self) -> Result<()> {
        let mask = tail_mask(self.k);
        if mask == 0 {
            return Ok(());
        }
        let expect = if self.pad_fill { mask } else { 0 };
        let last = self.words_per_vector - 1;
        for v in 0..self.vectors {
            if self.word(v, last) & mask != expect {
                return Err(Error::PaddingAudit { row: v });
            }
        }
        Ok(())
    }
}

/// SWAR population count, bit-identical to the hardware instruction.
#[inline]
pub fn popcount_software(x: u64) -> u32 {
    let x = x - ((x >> 1) & 0x5555_5555_5555_5555);
    let x = (x & 0x3333_3333_3333_3333) + ((x >> 2) & 0x3333_3333_3333_3333);
    let x = (x + (x >> 4)) & 0x0f0f_0f0f_0f0f_0f0f;
    (x.wrapping_mul(0x0101_0101_0101_0101) >> 56) as u32
}

/// Whether the CPU has a native population-count instruction.
pub fn native_popcount_available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("popcnt")
    }
    #[cfg(target_arch = "aarch64")]
    {
        true
    }
    #[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
    {
        false
    }
}

/// Agreement count `Σ popcount(xnor(a_w, b_w))` of two packed spans of
/// logical length `n`, with complementary tail padding. The ±1 dot product is
/// `2p − n`.
pub fn dot_xnor_popcount(a: &[u64], b: &[u64], n: usize) -> Result<u32> {
    let words = words_for(n);
    if a.len() != words || b.len() != words {
        return Err(Error::shape(format!(
            "dot of length {n} needs {words} words per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (!(x ^ y)).count_ones()).sum())
}
