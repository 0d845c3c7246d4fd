//! GEMM timing sweeps over convolution shapes.
//!
//! A convolution with `F` filters of `kh×kw` over `C` input channels, for a
//! batch of `B` images with `P` output positions each, lowers to a GEMM with
//! `M = F`, `N = B·P`, `K = kh·kw·C`.

use std::fmt::Write as _;

use binnet::gemm::{benchmark_kernel, BenchOptions, BenchRecord, GemmDims, GemmOptions, KernelId};

use crate::args::{BenchCommand, BenchCommon, ConvBenchArgs, GemmBenchArgs, SweepAxis};
use crate::error::{CliError, Context, Result};
use crate::{check_output_dir, resolve_threads, write_output};

pub const SWEEP_HEADER: &str = "speedup,speedup_with_pack,axis,value";

/// Default axis values; input channels follow the GEMM evaluation figure.
pub fn default_values(axis: SweepAxis) -> Vec<usize> {
    match axis {
        SweepAxis::InputChannels => vec![32, 64, 128, 256],
        SweepAxis::Filters => vec![16, 32, 64, 128],
        SweepAxis::KernelSize => vec![1, 3, 5, 7],
    }
}

pub fn axis_name(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::InputChannels => "input_channels",
        SweepAxis::Filters => "filters",
        SweepAxis::KernelSize => "kernel_size",
    }
}

/// A validated sweep.
#[derive(Debug, Clone)]
pub struct BenchSweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub channels: usize,
    pub filters: usize,
    pub kernel: usize,
    pub batch: usize,
    pub positions: usize,
    pub kernels: Vec<KernelId>,
}

impl BenchSweepConfig {
    pub fn from_args(args: &ConvBenchArgs) -> Result<Self> {
        let values = match &args.values {
            Some(s) => parse_list(s)?,
            None => default_values(args.axis),
        };
        let cfg = BenchSweepConfig {
            axis: args.axis,
            values,
            channels: args.channels,
            filters: args.filters,
            kernel: args.kernel,
            batch: args.batch,
            positions: args.positions,
            kernels: parse_kernels(&args.common.kernels)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.values.windows(2).any(|w| w[0] >= w[1]) || self.values[0] == 0 {
            return Err(CliError::Usage(format!(
                "axis values {:?} must be positive and strictly increasing",
                self.values
            )));
        }
        let fixed = [self.channels, self.filters, self.kernel, self.batch, self.positions];
        if fixed.contains(&0) {
            return Err(CliError::Usage("fixed sweep parameters must be positive".into()));
        }
        if self.kernels.is_empty() {
            return Err(CliError::Usage("no kernels selected".into()));
        }
        Ok(())
    }

    /// GEMM shape at one axis value.
    pub fn dims_at(&self, value: usize) -> Result<GemmDims> {
        let (mut c, mut f, mut k) = (self.channels, self.filters, self.kernel);
        match self.axis {
            SweepAxis::InputChannels => c = value,
            SweepAxis::Filters => f = value,
            SweepAxis::KernelSize => k = value,
        }
        GemmDims::new(f, self.batch * self.positions, k * k * c).ctx("sweep shape")
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{v:?} in {s:?} is not a count")))
        })
        .collect()
}

pub fn parse_kernels(s: &str) -> Result<Vec<KernelId>> {
    if s.trim() == "all" {
        return Ok(KernelId::ALL.to_vec());
    }
    let mut out = Vec::new();
    for name in s.split(',') {
        let k = name.trim().parse::<KernelId>().ctx("--kernels")?;
        if !out.contains(&k) {
            out.push(k);
        }
    }
    Ok(out)
}

/// One timed kernel with its speedups over `naive_f32` at the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub record: BenchRecord,
    pub speedup: Option<f64>,
    pub speedup_with_pack: Option<f64>,
    pub axis: &'static str,
    pub value: usize,
}

impl SweepRow {
    pub fn csv_header() -> String {
        format!("{},{SWEEP_HEADER}", BenchRecord::CSV_HEADER)
    }

    pub fn to_csv_row(&self) -> String {
        let f = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.3}"));
        format!(
            "{},{},{},{},{}",
            self.record.to_csv_row(),
            f(self.speedup),
            f(self.speedup_with_pack),
            self.axis,
            self.value
        )
    }
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut out = SweepRow::csv_header();
    out.push('\n');
    for r in rows {
        writeln!(out, "{}", r.to_csv_row()).unwrap();
    }
    out
}

fn bench_options(common: &BenchCommon) -> Result<BenchOptions> {
    if common.repeats < 3 {
        return Err(CliError::Usage(format!("--repeats {} < 3", common.repeats)));
    }
    if common.warmup < 1 {
        return Err(CliError::Usage("--warmup must be at least 1".into()));
    }
    Ok(BenchOptions {
        repeats: common.repeats,
        warmup: common.warmup,
        seed: common.seed,
        gemm: GemmOptions::with_workers(resolve_threads(common.threads)?),
        ..BenchOptions::default()
    })
}

/// Times every kernel at one shape.
pub fn bench_shape(
    kernels: &[KernelId],
    dims: GemmDims,
    opts: &BenchOptions,
    axis: &'static str,
    value: usize,
) -> Result<Vec<SweepRow>> {
    let mut records = Vec::with_capacity(kernels.len());
    for &k in kernels {
        let r = benchmark_kernel(k, dims, opts).map_err(|e| match e {
            binnet::Error::MemoryGuard { bytes, limit } => CliError::Usage(format!(
                "{k} at M={} N={} K={} needs {bytes} bytes, over the {limit} byte limit; shrink the shape",
                dims.m, dims.n, dims.k
            )),
            e => CliError::from_core(format!("benchmarking {k}"), e),
        })?;
        log::info!("{} M={} N={} K={}: {} ns", k, dims.m, dims.n, dims.k, r.median_ns);
        records.push(r);
    }
    if let Some(first) = records.first() {
        if records.iter().any(|r| r.checksum != first.checksum) {
            return Err(CliError::Internal(format!(
                "kernel checksums disagree at M={} N={} K={}",
                dims.m, dims.n, dims.k
            )));
        }
    }
    let naive = records.iter().find(|r| r.kernel == KernelId::NaiveF32).map(|r| r.median_ns as f64);
    Ok(records
        .into_iter()
        .map(|record| SweepRow {
            speedup: naive.map(|n| n / record.median_ns.max(1) as f64),
            speedup_with_pack: naive.map(|n| n / record.total_ns().max(1) as f64),
            record,
            axis,
            value,
        })
        .collect())
}

pub fn run_sweep(cfg: &BenchSweepConfig, opts: &BenchOptions) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &v in &cfg.values {
        rows.extend(bench_shape(&cfg.kernels, cfg.dims_at(v)?, opts, axis_name(cfg.axis), v)?);
    }
    Ok(rows)
}

fn emit(rows: &[SweepRow], common: &BenchCommon) -> Result<()> {
    let csv = to_csv(rows);
    match &common.out {
        Some(path) => write_output(path, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

pub fn run_gemm(args: &GemmBenchArgs) -> Result<Vec<SweepRow>> {
    let kernels = parse_kernels(&args.common.kernels)?;
    let dims = GemmDims::new(args.m, args.n, args.k).ctx("GEMM shape")?;
    if let Some(out) = &args.common.out {
        check_output_dir(out)?;
    }
    let opts = bench_options(&args.common)?;
    let rows = bench_shape(&kernels, dims, &opts, "k", args.k)?;
    emit(&rows, &args.common)?;
    Ok(rows)
}

pub fn run_conv(args: &ConvBenchArgs) -> Result<Vec<SweepRow>> {
    let cfg = BenchSweepConfig::from_args(args)?;
    if let Some(out) = &args.common.out {
        check_output_dir(out)?;
    }
    let opts = bench_options(&args.common)?;
    let rows = run_sweep(&cfg, &opts)?;
    emit(&rows, &args.common)?;
    Ok(rows)
}

pub fn run(cmd: &BenchCommand) -> Result<Vec<SweepRow>> {
    match cmd {
        BenchCommand::Gemm(a) => run_gemm(a),
        BenchCommand::Conv(a) => run_conv(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::args::BenchCommon;

    fn common() -> BenchCommon {
        BenchCommon {
            kernels: "all".into(),
            repeats: 3,
            warmup: 1,
            seed: 1,
            threads: Some(2),
            out: None,
        }
    }

    fn conv_args(axis: SweepAxis, values: &str) -> ConvBenchArgs {
        ConvBenchArgs {
            axis,
            values: Some(values.into()),
            channels: 4,
            filters: 8,
            kernel: 3,
            batch: 2,
            positions: 16,
            common: common(),
        }
    }

    #[test]
    fn conv_shapes_follow_the_lowering() {
        let cfg = BenchSweepConfig::from_args(&conv_args(SweepAxis::KernelSize, "1,3")).unwrap();
        let d = cfg.dims_at(3).unwrap();
        assert_eq!((d.m, d.n, d.k), (8, 32, 36));
        let cfg = BenchSweepConfig::from_args(&conv_args(SweepAxis::Filters, "2")).unwrap();
        let d = cfg.dims_at(2).unwrap();
        assert_eq!((d.m, d.n, d.k), (2, 32, 36));
    }

    #[test]
    fn figure_defaults() {
        assert_eq!(default_values(SweepAxis::InputChannels), vec![32, 64, 128, 256]);
        let d = BenchSweepConfig {
            axis: SweepAxis::InputChannels,
            values: default_values(SweepAxis::InputChannels),
            channels: 256,
            filters: 64,
            kernel: 5,
            batch: 200,
            positions: 64,
            kernels: KernelId::ALL.to_vec(),
        }
        .dims_at(256)
        .unwrap();
        assert_eq!((d.m, d.n, d.k), (64, 12800, 6400));
    }

    #[test]
    fn sweep_values_must_increase() {
        for bad in ["4,4", "8,4", "0,4", "x"] {
            assert!(BenchSweepConfig::from_args(&conv_args(SweepAxis::InputChannels, bad)).is_err());
        }
    }

    #[test]
    fn kernel_lists_parse() {
        assert_eq!(parse_kernels("all").unwrap().len(), KernelId::ALL.len());
        assert_eq!(
            parse_kernels("xnor_base, naive_f32,xnor_base").unwrap(),
            vec![KernelId::XnorBase, KernelId::NaiveF32]
        );
        assert!(parse_kernels("cblas").is_err());
    }

    #[test]
    fn csv_round_trips_with_one_row_per_kernel_and_value() {
        let cfg = BenchSweepConfig::from_args(&conv_args(SweepAxis::InputChannels, "1,2,3")).unwrap();
        let rows = run_sweep(&cfg, &bench_options(&common()).unwrap()).unwrap();
        assert_eq!(rows.len(), 3 * KernelId::ALL.len());
        let csv = to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), SweepRow::csv_header());
        let parsed: Vec<BenchRecord> = lines.map(|l| BenchRecord::from_csv_row(l).unwrap()).collect();
        let records: Vec<BenchRecord> = rows.iter().map(|r| r.record.clone()).collect();
        assert_eq!(parsed, records);
        assert!(rows.iter().all(|r| r.speedup.is_some()));
    }

    #[test]
    fn memory_guard_is_a_usage_error() {
        let dims = GemmDims::new(1 << 14, 1 << 14, 1 << 14).unwrap();
        let err = bench_shape(&[KernelId::NaiveF32], dims, &bench_options(&common()).unwrap(), "k", 1);
        assert!(matches!(err, Err(CliError::Usage(_))));
    }
}
