//! Median-of-repeats timing of a single GEMM kernel on random ±1 operands.

use std::hint::black_box;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{xnor_gemm_counts, GemmDims, GemmOptions, KernelId};
use crate::bitpack::BitMatrix;
use crate::error::{Error, Result};
use crate::tensor::{gemm_f32_raw, TensorF32};

/// One timed kernel configuration, one CSV row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchRecord {
    pub kernel: KernelId,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub repeats: usize,
    pub median_ns: u64,
    /// Median time to binarize and pack the right operand; `0` for `naive_f32`.
    pub pack_ns: u64,
    /// Sum of C in the popcount domain, so every kernel reports the same value.
    pub checksum: u64,
    pub seed: u64,
}

impl BenchRecord {
    pub const CSV_HEADER: &'static str = "kernel,M,N,K,repeats,median_ns,pack_ns,checksum,seed";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.kernel,
            self.m,
            self.n,
            self.k,
            self.repeats,
            self.median_ns,
            self.pack_ns,
            self.checksum,
            self.seed
        )
    }

    /// Parses the first nine fields of a row; trailing derived columns are ignored.
    pub fn from_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() < 9 {
            return Err(Error::InvalidArgument(format!("bench row has {} fields: {line:?}", fields.len())));
        }
        let num = |i: usize| -> Result<u64> {
            fields[i]
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("field {i} of {line:?} is not an integer")))
        };
        Ok(BenchRecord {
            kernel: fields[0].parse()?,
            m: num(1)? as usize,
            n: num(2)? as usize,
            k: num(3)? as usize,
            repeats: num(4)? as usize,
            median_ns: num(5)?,
            pack_ns: num(6)?,
            checksum: num(7)?,
            seed: num(8)?,
        })
    }

    /// Kernel plus input packing time.
    pub fn total_ns(&self) -> u64 {
        self.median_ns + self.pack_ns
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub gemm: GemmOptions,
    /// Upper bound on operand and output bytes.
    pub memory_limit: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            repeats: 5,
            warmup: 1,
            seed: 42,
            gemm: GemmOptions::default(),
            memory_limit: 2 << 30,
        }
    }
}

/// Random ±1 tensor, one random bit per element.
pub fn random_pm1(dims: &[usize], rng: &mut impl RngCore) -> TensorF32 {
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let bits = rng.next_u64();
        let take = (n - data.len()).min(64);
        data.extend((0..take).map(|i| if bits >> i & 1 == 1 { 1.0f32 } else { -1.0 }));
    }
    TensorF32::new(dims.to_vec(), data).expect("dims validated by caller")
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

fn footprint(kernel: KernelId, dims: &GemmDims) -> u64 {
    let (m, n, k) = (dims.m as u64, dims.n as u64, dims.k as u64);
    let float_operands = 4 * (m * k + k * n);
    let packed = 8 * dims.words_per_k as u64 * (m + n);
    let out = if kernel.is_xnor() { 8 * m * n } else { 4 * m * n };
    float_operands + packed + out
}

/// Times `kernel` on `dims`: `warmup` untimed runs, then `repeats` timed runs,
/// reporting the median. Operands are regenerated from `opts.seed`, so every
/// kernel sees the same matrices and reports the same checksum.
pub fn benchmark_kernel(kernel: KernelId, dims: GemmDims, opts: &BenchOptions) -> Result<BenchRecord> {
    if opts.repeats < 3 {
        return Err(Error::InvalidArgument(format!("repeats {} < 3", opts.repeats)));
    }
    if opts.warmup < 1 {
        return Err(Error::InvalidArgument("warmup must be at least 1".into()));
    }
    let bytes = footprint(kernel, &dims);
    if bytes > opts.memory_limit {
        return Err(Error::MemoryGuard {
            bytes,
            limit: opts.memory_limit,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let a = random_pm1(&[dims.m, dims.k], &mut rng);
    let b = random_pm1(&[dims.k, dims.n], &mut rng);

    let mut times = Vec::with_capacity(opts.repeats);
    let mut pack_times = Vec::with_capacity(opts.repeats);
    let checksum;

    if kernel.is_xnor() {
        // weights are packed ahead of time; only the input side is timed
        let pa = BitMatrix::pack_a_signs(a.data(), dims.m, dims.k);
        let pb = BitMatrix::pack_b_signs(b.data(), dims.k, dims.n);
        for _ in 0..opts.warmup {
            black_box(xnor_gemm_counts(kernel, &pa, &pb, dims, &opts.gemm)?);
        }
        let mut last = Vec::new();
        for _ in 0..opts.repeats {
            let t = Instant::now();
            let packed = black_box(BitMatrix::pack_b_signs(black_box(b.data()), dims.k, dims.n));
            pack_times.push(t.elapsed().as_nanos() as u64);
            drop(packed);

            let t = Instant::now();
            last = black_box(xnor_gemm_counts(kernel, &pa, &pb, dims, &opts.gemm)?);
            times.push(t.elapsed().as_nanos() as u64);
        }
        checksum = last.iter().map(|&c| c as u64).sum();
    } else {
        let mut c = vec![0.0f32; dims.m * dims.n];
        for _ in 0..opts.warmup {
            gemm_f32_raw(dims.m, dims.n, dims.k, a.data(), b.data(), black_box(&mut c));
        }
        for _ in 0..opts.repeats {
            let t = Instant::now();
            gemm_f32_raw(dims.m, dims.n, dims.k, a.data(), b.data(), black_box(&mut c));
            times.push(t.elapsed().as_nanos() as u64);
            pack_times.push(0);
        }
        // (dot + K) / 2 per entry, summed exactly
        let dot_sum: i64 = c.iter().map(|&v| v as i64).sum();
        let total = dot_sum + (dims.m * dims.n * dims.k) as i64;
        debug_assert!(total >= 0 && total % 2 == 0);
        checksum = (total / 2) as u64;
    }

    Ok(BenchRecord {
        kernel,
        m: dims.m,
        n: dims.n,
        k: dims.k,
        repeats: opts.repeats,
        median_ns: median(times),
        pack_ns: median(pack_times),
        checksum,
        seed: opts.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> BenchOptions {
        BenchOptions {
            repeats: 3,
            warmup: 1,
            ..Default::default()
        }
    }

    #[test]
    fn checksums_agree_across_kernels() {
        let dims = GemmDims::new(9, 40, 130).unwrap();
        let records: Vec<_> = KernelId::ALL
            .iter()
            .map(|&k| benchmark_kernel(k, dims, &quick()).unwrap())
            .collect();
        for r in &records {
            assert_eq!(r.checksum, records[0].checksum, "{}", r.kernel);
        }
        assert_eq!(records[0].pack_ns, 0);
    }

    #[test]
    fn same_seed_same_checksum() {
        let dims = GemmDims::new(4, 30, 70).unwrap();
        let a = benchmark_kernel(KernelId::XnorBase, dims, &quick()).unwrap();
        let b = benchmark_kernel(KernelId::XnorBase, dims, &quick()).unwrap();
        assert_eq!(a.checksum, b.checksum);
        let other = BenchOptions { seed: 7, ..quick() };
        assert_ne!(benchmark_kernel(KernelId::XnorBase, dims, &other).unwrap().checksum, a.checksum);
    }

    #[test]
    fn rejects_bad_options() {
        let dims = GemmDims::new(2, 2, 2).unwrap();
        let few = BenchOptions { repeats: 2, ..quick() };
        assert!(benchmark_kernel(KernelId::XnorBase, dims, &few).is_err());
        let cold = BenchOptions { warmup: 0, ..quick() };
        assert!(benchmark_kernel(KernelId::XnorBase, dims, &cold).is_err());
        let huge = GemmDims::new(100_000, 100_000, 100_000).unwrap();
        assert!(matches!(
            benchmark_kernel(KernelId::NaiveF32, huge, &quick()),
            Err(Error::MemoryGuard { .. })
        ));
    }

    #[test]
    fn csv_roundtrip() {
        let r = BenchRecord {
            kernel: KernelId::XnorParallel,
            m: 64,
            n: 12800,
            k: 6400,
            repeats: 5,
            median_ns: 123,
            pack_ns: 45,
            checksum: 999,
            seed: 42,
        };
        let row = r.to_csv_row();
        assert_eq!(row, "xnor_parallel,64,12800,6400,5,123,45,999,42");
        assert_eq!(BenchRecord::from_csv_row(&row).unwrap(), r);
        assert_eq!(BenchRecord::from_csv_row(&format!("{row},3.5")).unwrap(), r);
        assert!(BenchRecord::from_csv_row("xnor_base,1,2").is_err());
    }
}
