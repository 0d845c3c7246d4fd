//! The xnor-popcount GEMM kernel family.
//!
//! Every kernel computes the popcount-domain product
//! `C[m,n] = Σ_w popcount(!(A[m,w] ^ B[w,n]))`, which lies in `[0, K]`; the
//! ±1 dot product is `2C − K`. Kernels accumulate in `u32` and convert to
//! `f32` once at the end, so all of them agree bit-for-bit.

mod bench;
mod kernels;

use std::fmt;
use std::str::FromStr;

pub use bench::{benchmark_kernel, random_pm1, BenchOptions, BenchRecord};

use crate::bitpack::{words_for, BitMatrix, WordLayout, A_PAD_FILL, B_PAD_FILL};
use crate::error::{Error, Result};
use crate::tensor::TensorF32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemmDims {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub words_per_k: usize,
}

impl GemmDims {
    pub fn new(m: usize, n: usize, k: usize) -> Result<Self> {
        if m == 0 || n == 0 || k == 0 {
            return Err(Error::shape(format!("gemm dims M={m} N={n} K={k} must be positive")));
        }
        Ok(GemmDims {
            m,
            n,
            k,
            words_per_k: words_for(k),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelId {
    NaiveF32,
    XnorBase,
    XnorBlocked,
    XnorUnrolled,
    XnorParallel,
}

impl KernelId {
    pub const ALL: [KernelId; 5] = [
        KernelId::NaiveF32,
        KernelId::XnorBase,
        KernelId::XnorBlocked,
        KernelId::XnorUnrolled,
        KernelId::XnorParallel,
    ];

    pub const XNOR: [KernelId; 4] = [
        KernelId::XnorBase,
        KernelId::XnorBlocked,
        KernelId::XnorUnrolled,
        KernelId::XnorParallel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelId::NaiveF32 => "naive_f32",
            KernelId::XnorBase => "xnor_base",
            KernelId::XnorBlocked => "xnor_blocked",
            KernelId::XnorUnrolled => "xnor_unrolled",
            KernelId::XnorParallel => "xnor_parallel",
        }
    }

    pub fn is_xnor(self) -> bool {
        self != KernelId::NaiveF32
    }
}

impl fmt::Display for KernelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelId::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown kernel {s:?}")))
    }
}

/// Tile sizes of the blocked kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    /// Rows of A/C per tile.
    pub rows: usize,
    /// Packed words of K per tile.
    pub words: usize,
    /// Columns of B/C per tile.
    pub cols: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            rows: 32,
            words: 512,
            cols: 256,
        }
    }
}

impl BlockConfig {
    fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.words == 0 || self.cols == 0 {
            return Err(Error::InvalidArgument(format!("block sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Which population-count implementation a kernel runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopcountImpl {
    /// Hardware instruction, falling back to software when the CPU lacks it.
    Native,
    Software,
}

#[derive(Debug, Clone, Copy)]
pub struct GemmOptions {
    pub block: BlockConfig,
    /// Worker threads for [`KernelId::XnorParallel`]; other kernels ignore it.
    pub workers: usize,
    pub popcount: PopcountImpl,
}

impl Default for GemmOptions {
    fn default() -> Self {
        GemmOptions {
            block: BlockConfig::default(),
            workers: 1,
            popcount: PopcountImpl::Native,
        }
    }
}

impl GemmOptions {
    pub fn with_workers(workers: usize) -> Self {
        GemmOptions {
            workers,
            ..Default::default()
        }
    }
}

fn check_operands(a: &BitMatrix, b: &BitMatrix, dims: &GemmDims) -> Result<()> {
    if a.layout() != WordLayout::VectorMajor || a.pad_fill() != A_PAD_FILL {
        return Err(Error::InvalidArgument(
            "left operand must be row-packed with pad fill 0".into(),
        ));
    }
    if b.layout() != WordLayout::WordMajor || b.pad_fill() != B_PAD_FILL {
        return Err(Error::InvalidArgument(
            "right operand must be column-packed with pad fill 1".into(),
        ));
    }
    if a.vectors() != dims.m || b.vectors() != dims.n || a.k() != dims.k || b.k() != dims.k {
        return Err(Error::shape(format!(
            "operands [{}x{}]·[{}x{}] do not match dims {:?}",
            a.vectors(),
            a.k(),
            b.k(),
            b.vectors(),
            dims
        )));
    }
    if dims.k >= 1 << 24 {
        return Err(Error::shape(format!("K={} too large for exact f32 output", dims.k)));
    }
    a.audit()?;
    b.audit()
}

/// Runs an xnor kernel into a `u32` accumulator of `M·N` counts.
pub fn xnor_gemm_counts(
    kernel: KernelId,
    a: &BitMatrix,
    b: &BitMatrix,
    dims: GemmDims,
    opts: &GemmOptions,
) -> Result<Vec<u32>> {
    check_operands(a, b, &dims)?;
    opts.block.validate()?;
    let mut out = vec![0u32; dims.m * dims.n];
    let problem = kernels::Problem {
        a: a.words(),
        b: b.words(),
        n: dims.n,
        words: dims.words_per_k,
    };
    let hw = opts.popcount == PopcountImpl::Native && crate::bitpack::native_popcount_available();
    match kernel {
        KernelId::NaiveF32 => {
            return Err(Error::InvalidArgument("naive_f32 is not an xnor kernel".into()))
        }
        KernelId::XnorBase => kernels::run(kernels::Variant::Base, &problem, 0, &mut out, &opts.block, hw),
        KernelId::XnorBlocked => {
            kernels::run(kernels::Variant::Blocked, &problem, 0, &mut out, &opts.block, hw)
        }
        KernelId::XnorUnrolled => {
            kernels::run(kernels::Variant::Unrolled, &problem, 0, &mut out, &opts.block, hw)
        }
        KernelId::XnorParallel => {
            if opts.workers == 0 {
                return Err(Error::InvalidArgument("worker count must be at least 1".into()));
            }
            // static row partition, each worker owns a disjoint slice of C
            let rows_per = dims.m.div_ceil(opts.workers.min(dims.m));
            std::thread::scope(|s| {
                for (i, chunk) in out.chunks_mut(rows_per * dims.n).enumerate() {
                    let problem = &problem;
                    let block = &opts.block;
                    s.spawn(move || {
                        kernels::run(kernels::Variant::Unrolled, problem, i * rows_per, chunk, block, hw)
                    });
                }
            });
        }
    }
    Ok(out)
}

/// Runs an xnor kernel, returning the popcount-domain product `[M,N]`.
pub fn xnor_gemm(
    kernel: KernelId,
    a: &BitMatrix,
    b: &BitMatrix,
    dims: GemmDims,
    opts: &GemmOptions,
) -> Result<TensorF32> {
    let counts = xnor_gemm_counts(kernel, a, b, dims, opts)?;
    TensorF32::new([dims.m, dims.n], counts.into_iter().map(|c| c as f32).collect())
}

/// Baseline kernel, loop order m → k-word → n.
pub fn xnor_gemm_base(a: &BitMatrix, b: &BitMatrix, dims: GemmDims) -> Result<TensorF32> {
    xnor_gemm(KernelId::XnorBase, a, b, dims, &GemmOptions::default())
}

pub fn xnor_gemm_blocked(a: &BitMatrix, b: &BitMatrix, dims: GemmDims) -> Result<TensorF32> {
    xnor_gemm(KernelId::XnorBlocked, a, b, dims, &GemmOptions::default())
}

pub fn xnor_gemm_unrolled(a: &BitMatrix, b: &BitMatrix, dims: GemmDims) -> Result<TensorF32> {
    xnor_gemm(KernelId::XnorUnrolled, a, b, dims, &GemmOptions::default())
}

pub fn xnor_gemm_parallel(
    a: &BitMatrix,
    b: &BitMatrix,
    dims: GemmDims,
    workers: usize,
) -> Result<TensorF32> {
    xnor_gemm(KernelId::XnorParallel, a, b, dims, &GemmOptions::with_workers(workers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qmath::map_dot_to_xnor;
    use crate::tensor::gemm_f32;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn operands(m: usize, n: usize, k: usize, seed: u64) -> (TensorF32, TensorF32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (random_pm1(&[m, k], &mut rng), random_pm1(&[k, n], &mut rng))
    }

    fn float_oracle(a: &TensorF32, b: &TensorF32, k: usize) -> Vec<f32> {
        gemm_f32(a, b)
            .unwrap()
            .data()
            .iter()
            .map(|&d| map_dot_to_xnor(d, k).unwrap())
            .collect()
    }

    #[test]
    fn full_agreement_is_k() {
        let ones = TensorF32::full([1, 64], 1.0).unwrap();
        let a = BitMatrix::pack_a(&ones).unwrap();
        let b = BitMatrix::pack_b(&ones.transpose2().unwrap()).unwrap();
        let c = xnor_gemm_base(&a, &b, GemmDims::new(1, 1, 64).unwrap()).unwrap();
        assert_eq!(c.data(), &[64.0]);
    }

    #[test]
    fn three_element_example() {
        let a = TensorF32::new([1, 3], vec![1.0, -1.0, 1.0]).unwrap();
        let b = TensorF32::new([3, 1], vec![1.0, 1.0, -1.0]).unwrap();
        let c = xnor_gemm_base(
            &BitMatrix::pack_a(&a).unwrap(),
            &BitMatrix::pack_b(&b).unwrap(),
            GemmDims::new(1, 1, 3).unwrap(),
        )
        .unwrap();
        assert_eq!(c.data(), &[1.0]);
    }

    #[test]
    fn base_matches_float_oracle() {
        let (a, b) = operands(8, 12, 100, 4);
        let dims = GemmDims::new(8, 12, 100).unwrap();
        let c = xnor_gemm_base(&BitMatrix::pack_a(&a).unwrap(), &BitMatrix::pack_b(&b).unwrap(), dims)
            .unwrap();
        assert_eq!(c.data(), float_oracle(&a, &b, 100).as_slice());
    }

    #[test]
    fn variants_match_base_on_edge_shapes() {
        let shapes = [
            (1, 1, 1),
            (1, 7, 63),
            (5, 1, 64),
            (3, 9, 65),
            (33, 17, 128),
            (70, 300, 1000),
            (2, 513, 64 * 9),
        ];
        // small tiles so the tile edges land inside these shapes
        let block = BlockConfig { rows: 3, words: 2, cols: 5 };
        for (i, &(m, n, k)) in shapes.iter().enumerate() {
            let (a, b) = operands(m, n, k, i as u64);
            let pa = BitMatrix::pack_a(&a).unwrap();
            let pb = BitMatrix::pack_b(&b).unwrap();
            let dims = GemmDims::new(m, n, k).unwrap();
            let base = xnor_gemm_base(&pa, &pb, dims).unwrap();
            for kernel in KernelId::XNOR {
                for block in [block, BlockConfig::default()] {
                    for popcount in [PopcountImpl::Native, PopcountImpl::Software] {
                        let opts = GemmOptions { block, workers: 3, popcount };
                        let c = xnor_gemm(kernel, &pa, &pb, dims, &opts).unwrap();
                        assert_eq!(c, base, "{kernel} {m}x{n}x{k}");
                    }
                }
            }
        }
    }

    #[test]
    fn parallel_is_independent_of_worker_count() {
        let (a, b) = operands(37, 50, 200, 8);
        let pa = BitMatrix::pack_a(&a).unwrap();
        let pb = BitMatrix::pack_b(&b).unwrap();
        let dims = GemmDims::new(37, 50, 200).unwrap();
        let one = xnor_gemm_parallel(&pa, &pb, dims, 1).unwrap();
        for workers in [2, 8, 64] {
            assert_eq!(xnor_gemm_parallel(&pa, &pb, dims, workers).unwrap(), one);
        }
        assert!(xnor_gemm_parallel(&pa, &pb, dims, 0).is_err());
    }

    #[test]
    fn rejects_mismatched_operands() {
        let (a, b) = operands(4, 5, 70, 1);
        let pa = BitMatrix::pack_a(&a).unwrap();
        let pb = BitMatrix::pack_b(&b).unwrap();
        assert!(xnor_gemm_base(&pa, &pb, GemmDims::new(4, 5, 71).unwrap()).is_err());
        assert!(xnor_gemm_base(&pa, &pb, GemmDims::new(5, 5, 70).unwrap()).is_err());
        // operands swapped: wrong layouts
        assert!(xnor_gemm_base(&pb, &pa, GemmDims::new(5, 4, 70).unwrap()).is_err());
        assert!(GemmDims::new(0, 1, 1).is_err());
        assert!(xnor_gemm(KernelId::NaiveF32, &pa, &pb, GemmDims::new(4, 5, 70).unwrap(), &GemmOptions::default()).is_err());
    }

    #[test]
    fn kernel_names_roundtrip() {
        for k in KernelId::ALL {
            assert_eq!(k.name().parse::<KernelId>().unwrap(), k);
        }
        assert!("xnor_32".parse::<KernelId>().is_err());
    }
}
