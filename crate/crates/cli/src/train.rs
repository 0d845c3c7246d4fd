use std::fmt::Write as _;
use std::time::Instant;

use binnet::layers::build_lenet_quantized;
use binnet::layers::train::{evaluate, train_epoch, SgdConfig};
use binnet::layers::{Mode, Network};
use binnet::modelio;
use binnet::qmath::QuantSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::TrainArgs;
use crate::error::{CliError, Context, Result};
use crate::mnist::{MnistDataset, Split};
use crate::{check_output_dir, resolve_threads, write_output};

pub const METRICS_HEADER: &str = "epoch,train_loss,test_acc";

const EVAL_BATCH: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f32,
    pub test_acc: f32,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.4}", self.epoch, self.train_loss, self.test_acc)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Test accuracy of the saved model.
    pub best_acc: f32,
    pub best_epoch: usize,
    pub seconds: f64,
}

impl TrainReport {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for e in &self.epochs {
            writeln!(out, "{}", e.csv_row()).unwrap();
        }
        out
    }
}

/// `--bits` to the quantized-block width; 32 selects full precision.
pub fn bit_width(bits: u32) -> Result<Option<QuantSpec>> {
    match bits {
        32 => Ok(None),
        1..=31 => Ok(Some(QuantSpec::new(bits).expect("range checked"))),
        _ => Err(CliError::Usage(format!("--bits {bits}: expected 1..=31 or 32"))),
    }
}

fn validate(args: &TrainArgs) -> Result<()> {
    if args.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be positive".into()));
    }
    if !(args.lr.is_finite() && args.lr >= 0.0) {
        return Err(CliError::Usage(format!("--lr {} must be finite and non-negative", args.lr)));
    }
    if !(0.0..1.0).contains(&args.momentum) {
        return Err(CliError::Usage(format!("--momentum {} outside [0, 1)", args.momentum)));
    }
    if args.subset == Some(0) || args.test_subset == Some(0) {
        return Err(CliError::Usage("subsets must hold at least one image".into()));
    }
    check_output_dir(&args.out)?;
    if let Some(m) = &args.metrics {
        check_output_dir(m)?;
    }
    Ok(())
}

/// Trains, saves the best model to `args.out` and the metrics CSV to
/// `args.metrics`. Both files appear only when training succeeds.
pub fn run(args: &TrainArgs) -> Result<TrainReport> {
    let quant = bit_width(args.bits)?;
    validate(args)?;
    let threads = resolve_threads(args.threads)?;

    let mut train = MnistDataset::load(&args.data_dir, Split::Train)?;
    let mut test = MnistDataset::load(&args.data_dir, Split::Test)?;
    if let Some(n) = args.subset {
        train = train.take(n);
    }
    if let Some(n) = args.test_subset {
        test = test.take(n);
    }
    log::info!(
        "training {} LeNet on {} images, testing on {}",
        quant.map_or("full-precision".to_string(), |q| format!("{}-bit", q.bits())),
        train.len(),
        test.len()
    );

    let start = Instant::now();
    let mut net = build_lenet_quantized(quant, args.seed).ctx("building LeNet")?;
    net.set_workers(threads);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let cfg = SgdConfig {
        batch_size: args.batch_size,
        lr: args.lr,
        momentum: args.momentum,
    };

    let mut best: Option<(Network, f32, usize)> = None;
    let mut epochs = Vec::with_capacity(args.epochs);
    for epoch in 1..=args.epochs {
        let train_loss = train_epoch(&mut net, &train.images, &train.labels, &cfg, &mut rng)
            .map_err(|e| CliError::Data(format!("training diverged in epoch {epoch}: {e}")))?;
        net.clear_caches();
        let test_acc = evaluate(&net, &test.images, &test.labels, Mode::InferFloat, EVAL_BATCH)
            .ctx(format!("evaluating epoch {epoch}"))?;
        let m = EpochMetrics {
            epoch,
            train_loss,
            test_acc,
        };
        println!("{}", m.csv_row());
        epochs.push(m);
        if best.as_ref().is_none_or(|(_, acc, _)| test_acc > *acc) {
            best = Some((net.clone(), test_acc, epoch));
        }
    }
    let (model, best_acc, best_epoch) = match best {
        Some(b) => b,
        None => {
            let acc = evaluate(&net, &test.images, &test.labels, Mode::InferFloat, EVAL_BATCH)
                .ctx("evaluating the initial model")?;
            println!("untrained test accuracy {acc:.4}");
            (net, acc, 0)
        }
    };

    let report = TrainReport {
        epochs,
        best_acc,
        best_epoch,
        seconds: start.elapsed().as_secs_f64(),
    };
    let bytes = modelio::to_bytes(&model).ctx("serializing the model")?;
    if let Some(path) = &args.metrics {
        write_output(path, report.metrics_csv().as_bytes())?;
    }
    write_output(&args.out, &bytes)?;
    log::info!(
        "saved epoch {best_epoch} model (test accuracy {best_acc:.4}) to {} after {:.1}s",
        args.out.display(),
        report.seconds
    );
    Ok(report)
}
