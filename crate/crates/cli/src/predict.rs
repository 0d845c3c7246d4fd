use std::fs;
use std::path::Path;

use binnet::layers::train::argmax;
use binnet::layers::Network;
use binnet::modelio;
use binnet::tensor::TensorF32;

use crate::args::PredictArgs;
use crate::error::{CliError, Context, Result};
use crate::mnist::{scale_pixels, MnistDataset, Split, COLS, PIXELS, ROWS};
use crate::resolve_threads;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f32>,
}

/// A raw 28×28 grayscale file as a `[1, 1, 28, 28]` batch.
pub fn read_raw_image(path: &Path) -> Result<TensorF32> {
    let bytes = fs::read(path).ctx(format!("reading {}", path.display()))?;
    if bytes.len() != PIXELS {
        return Err(CliError::Usage(format!(
            "{} holds {} bytes; a raw {ROWS}x{COLS} grayscale image has {PIXELS}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(TensorF32::new([1, 1, ROWS, COLS], scale_pixels(&bytes)).expect("fixed shape"))
}

/// Classifies one `[1, ...]` image, packed models on the xnor path.
pub fn classify(net: &Network, image: &TensorF32) -> Result<Prediction> {
    let p = net
        .infer(image, net.default_mode())
        .map_err(|e| CliError::Usage(format!("model does not accept the image: {e}")))?;
    let probabilities = p.data().to_vec();
    Ok(Prediction {
        class: argmax(&probabilities),
        probabilities,
    })
}

pub fn run(args: &PredictArgs) -> Result<Prediction> {
    let threads = resolve_threads(args.threads)?;
    let image = match (&args.image, args.index) {
        (Some(path), _) => read_raw_image(path)?,
        (None, Some(index)) => {
            let test = MnistDataset::load(&args.data_dir, Split::Test)?;
            test.item(index).ok_or_else(|| {
                CliError::Usage(format!("--index {index} outside the {} test images", test.len()))
            })?
        }
        (None, None) => return Err(CliError::Usage("give --index or --image".into())),
    };
    let mut net = modelio::load_model(&args.model).ctx(format!("loading {}", args.model.display()))?;
    net.set_workers(threads);
    let pred = classify(&net, &image)?;
    println!("class {}", pred.class);
    let probs: Vec<String> = pred.probabilities.iter().map(|p| format!("{p:.6}")).collect();
    println!("probabilities {}", probs.join(" "));
    Ok(pred)
}
