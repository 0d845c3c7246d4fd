//! Mini-batch SGD epochs and batched evaluation.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Mode, Network};
use crate::error::{Error, Result};
use crate::tensor::TensorF32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            batch_size: 100,
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

/// Copies items `indices` of `images` into one batch tensor.
pub fn gather(images: &TensorF32, indices: &[usize]) -> Result<TensorF32> {
    let item = images.item_len();
    let mut data = Vec::with_capacity(indices.len() * item);
    for &i in indices {
        data.extend_from_slice(&images.data()[i * item..(i + 1) * item]);
    }
    let mut dims = images.dims().to_vec();
    dims[0] = indices.len();
    TensorF32::new(dims, data)
}

/// One pass over the data in a shuffled order; returns the mean batch loss.
pub fn train_epoch(
    net: &mut Network,
    images: &TensorF32,
    labels: &[usize],
    cfg: &SgdConfig,
    rng: &mut impl Rng,
) -> Result<f32> {
    if images.batch() != labels.len() {
        return Err(Error::shape(format!(
            "{} images but {} labels",
            images.batch(),
            labels.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0f64;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let x = gather(images, chunk)?;
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        total += net.train_batch(&x, &y, cfg.lr, cfg.momentum)? as f64;
        batches += 1;
    }
    Ok((total / batches as f64) as f32)
}

/// Predicted classes, evaluated `batch` items at a time.
pub fn predict_classes(net: &Network, images: &TensorF32, mode: Mode, batch: usize) -> Result<Vec<usize>> {
    let n = images.batch();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(batch.max(1)) {
        let end = (start + batch.max(1)).min(n);
        let p = net.infer(&images.slice_batch(start, end)?, mode)?;
        let classes = p.dims()[1];
        out.extend(p.data().chunks(classes).map(argmax));
    }
    Ok(out)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of items whose predicted class equals the label.
pub fn evaluate(net: &Network, images: &TensorF32, labels: &[usize], mode: Mode, batch: usize) -> Result<f32> {
    let pred = predict_classes(net, images, mode, batch)?;
    if pred.len() != labels.len() {
        return Err(Error::shape("label count differs from image count"));
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f32 / labels.len() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two well separated blobs; an MLP must fit them.
    #[test]
    fn learns_a_separable_problem() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 200;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { -1.0 } else { 1.0 };
            for _ in 0..4 {
                data.push(centre + rng.gen_range(-0.5..0.5));
            }
            labels.push(c);
        }
        let x = TensorF32::new([n, 4], data).unwrap();
        let mut net = Network::new(
            &[4],
            vec![
                LayerSpec::Fc { inputs: 4, units: 8, bias: true },
                LayerSpec::Tanh,
                LayerSpec::Fc { inputs: 8, units: 2, bias: true },
                LayerSpec::SoftmaxCe,
            ],
            0,
        )
        .unwrap();
        let cfg = SgdConfig { batch_size: 20, lr: 0.1, momentum: 0.9 };
        let first = train_epoch(&mut net, &x, &labels, &cfg, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..10 {
            last = train_epoch(&mut net, &x, &labels, &cfg, &mut rng).unwrap();
        }
        assert!(last < first);
        assert_eq!(evaluate(&net, &x, &labels, Mode::InferFloat, 64).unwrap(), 1.0);
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
    }
}
