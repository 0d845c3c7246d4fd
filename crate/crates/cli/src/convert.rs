use std::fs;

use binnet::modelio::{self, CompressionReport};

use crate::args::ConvertArgs;
use crate::error::{CliError, Context, Result};
use crate::write_output;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvertOutcome {
    pub report: CompressionReport,
    /// `None` with `--no-verify`.
    pub verified: Option<bool>,
}

/// Packs `args.input` into `args.output`. With verification on, a model that
/// fails the equivalence check is not written.
pub fn run(args: &ConvertArgs) -> Result<ConvertOutcome> {
    crate::check_output_dir(&args.output)?;
    let before = fs::read(&args.input).ctx(format!("reading {}", args.input.display()))?;
    let float_model = modelio::from_bytes(&before).ctx(format!("loading {}", args.input.display()))?;
    let packed = modelio::pack_model(&float_model).ctx("packing")?;
    let verified = if args.no_verify {
        None
    } else {
        let ok = modelio::verify_equivalence(&float_model, &packed, args.samples).ctx("verifying")?;
        if !ok {
            return Err(CliError::Internal(format!(
                "packed model disagrees with the float model on {} random inputs",
                args.samples
            )));
        }
        Some(ok)
    };
    let after = modelio::to_bytes(&packed).ctx("serializing")?;
    write_output(&args.output, &after)?;

    let report = CompressionReport::new(before.len() as u64, after.len() as u64);
    println!("bytes_before {}", report.bytes_before);
    println!("bytes_after {}", report.bytes_after);
    println!("ratio {:.2}", report.ratio);
    match verified {
        Some(_) => println!("verify passed ({} samples)", args.samples),
        None => println!("verify skipped"),
    }
    Ok(ConvertOutcome { report, verified })
}
