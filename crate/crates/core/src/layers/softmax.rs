use super::stale_cache;
use crate::error::{Error, Result};
use crate::tensor::TensorF32;

/// Row-wise softmax of `[B, classes]` scores.
pub(crate) fn softmax(logits: &TensorF32) -> Result<TensorF32> {
    let &[_, classes] = logits.dims() else {
        return Err(Error::shape(format!("softmax needs [batch, classes], got {:?}", logits.dims())));
    };
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(classes) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    TensorF32::new(logits.dims().to_vec(), out)
}

/// Mean cross-entropy of `labels` under `softmax(logits)`.
fn cross_entropy(logits: &TensorF32, labels: &[usize]) -> Result<f32> {
    let classes = logits.dims()[1];
    if labels.len() != logits.batch() {
        return Err(Error::shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            logits.batch()
        )));
    }
    let mut total = 0.0f64;
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        if label >= classes {
            return Err(Error::InvalidArgument(format!("label {label} outside 0..{classes}")));
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        total += lse - row[label] as f64;
    }
    Ok((total / labels.len() as f64) as f32)
}

/// Softmax probabilities and mean cross-entropy loss.
pub fn softmax_ce_forward(logits: &TensorF32, labels: &[usize]) -> Result<(TensorF32, f32)> {
    if logits.dims().first() == Some(&0) {
        return Err(Error::shape("softmax_ce on an empty batch"));
    }
    let probs = softmax(logits)?;
    let loss = cross_entropy(logits, labels)?;
    Ok((probs, loss))
}

/// Output layer: softmax forward, `(p − onehot) / B` backward.
#[derive(Debug, Clone, Default)]
pub struct SoftmaxCe {
    pub(crate) logits: Option<TensorF32>,
    pub(crate) probs: Option<TensorF32>,
}

impl SoftmaxCe {
    pub(crate) fn forward_train(&mut self, x: &TensorF32) -> Result<TensorF32> {
        let p = softmax(x)?;
        self.logits = Some(x.clone());
        self.probs = Some(p.clone());
        Ok(p)
    }

    pub(crate) fn loss(&self, labels: &[usize]) -> Result<f32> {
        let logits = self.logits.as_ref().ok_or_else(|| stale_cache("softmax_ce"))?;
        cross_entropy(logits, labels)
    }

    pub(crate) fn backward(&mut self, labels: &[usize]) -> Result<TensorF32> {
        self.logits = None;
        let mut p = self.probs.take().ok_or_else(|| stale_cache("softmax_ce"))?;
        let batch = p.batch();
        let classes = p.dims()[1];
        if labels.len() != batch {
            return Err(Error::shape(format!("{} labels for a batch of {batch}", labels.len())));
        }
        for (row, &label) in p.data_mut().chunks_mut(classes).zip(labels) {
            if label >= classes {
                return Err(Error::InvalidArgument(format!("label {label} outside 0..{classes}")));
            }
            row[label] -= 1.0;
            row.iter_mut().for_each(|v| *v /= batch as f32);
        }
        Ok(p)
    }
}
