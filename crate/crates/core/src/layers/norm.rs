use super::{stale_cache, Param};
use crate::error::{Error, Result};
use crate::tensor::TensorF32;

/// Per-channel batch normalization over `[B, C, ...]`: statistics are taken
/// over the batch and every spatial position of a channel.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub momentum: f32,
    pub epsilon: f32,
    pub(crate) gamma: Param,
    pub(crate) beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub(crate) cache: Option<Cache>,
}

#[derive(Debug, Clone)]
pub(crate) struct Cache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    dims: Vec<usize>,
}

impl BatchNorm {
    pub fn new(channels: usize, momentum: f32, epsilon: f32) -> Result<Self> {
        if channels == 0 || !(0.0..=1.0).contains(&momentum) || epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "batchnorm channels={channels} momentum={momentum} epsilon={epsilon}"
            )));
        }
        Ok(BatchNorm {
            channels,
            momentum,
            epsilon,
            gamma: Param::new(TensorF32::full([channels], 1.0)?),
            beta: Param::new(TensorF32::zeros([channels])?),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            cache: None,
        })
    }

    pub fn gamma(&self) -> &TensorF32 {
        &self.gamma.value
    }

    pub fn beta(&self) -> &TensorF32 {
        &self.beta.value
    }

    /// (batch, per-channel plane size)
    fn layout(&self, x: &TensorF32) -> Result<(usize, usize)> {
        let dims = x.dims();
        if dims.len() < 2 || dims[1] != self.channels {
            return Err(Error::shape(format!(
                "batchnorm over {} channels got input {dims:?}",
                self.channels
            )));
        }
        if dims[0] == 0 {
            return Err(Error::shape("batchnorm on an empty batch"));
        }
        Ok((dims[0], x.item_len() / self.channels))
    }

    fn apply(&self, x: &TensorF32, mean: &[f32], inv_std: &[f32], xhat: Option<&mut Vec<f32>>) -> Result<TensorF32> {
        let (batch, plane) = self.layout(x)?;
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        let mut out = vec![0.0; x.len()];
        let mut xh = vec![0.0; if xhat.is_some() { x.len() } else { 0 }];
        for n in 0..batch {
            for c in 0..self.channels {
                let off = (n * self.channels + c) * plane;
                for i in off..off + plane {
                    let h = (x.data()[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * h + b[c];
                    if !xh.is_empty() {
                        xh[i] = h;
                    }
                }
            }
        }
        if let Some(dst) = xhat {
            *dst = xh;
        }
        TensorF32::new(x.dims().to_vec(), out)
    }

    pub(crate) fn forward_infer(&self, x: &TensorF32) -> Result<TensorF32> {
        let inv: Vec<f32> = self.running_var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        self.apply(x, &self.running_mean, &inv, None)
    }

    pub(crate) fn forward_train(&mut self, x: &TensorF32) -> Result<TensorF32> {
        let (batch, plane) = self.layout(x)?;
        let count = (batch * plane) as f64;
        let mut sum = vec![0.0f64; self.channels];
        let mut sq = vec![0.0f64; self.channels];
        for n in 0..batch {
            for c in 0..self.channels {
                let off = (n * self.channels + c) * plane;
                for &v in &x.data()[off..off + plane] {
                    sum[c] += v as f64;
                }
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        for n in 0..batch {
            for c in 0..self.channels {
                let off = (n * self.channels + c) * plane;
                for &v in &x.data()[off..off + plane] {
                    let d = v as f64 - mean[c];
                    sq[c] += d * d;
                }
            }
        }
        let var: Vec<f64> = sq.iter().map(|s| s / count).collect();
        let mean32: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
        let inv_std: Vec<f32> = var.iter().map(|&v| (1.0 / (v + self.epsilon as f64).sqrt()) as f32).collect();

        let mut xhat = Vec::new();
        let y = self.apply(x, &mean32, &inv_std, Some(&mut xhat))?;

        let m = self.momentum;
        for c in 0..self.channels {
            self.running_mean[c] = m * self.running_mean[c] + (1.0 - m) * mean32[c];
            self.running_var[c] = m * self.running_var[c] + (1.0 - m) * var[c] as f32;
        }
        self.cache = Some(Cache {
            xhat,
            inv_std,
            dims: x.dims().to_vec(),
        });
        Ok(y)
    }

    pub(crate) fn backward(&mut self, grad: &TensorF32) -> Result<TensorF32> {
        let cache = self.cache.take().ok_or_else(|| stale_cache("batchnorm"))?;
        let batch = cache.dims[0];
        let plane = cache.xhat.len() / (batch * self.channels);
        let count = (batch * plane) as f32;
        let dy = grad.data();

        let mut dbeta = vec![0.0f32; self.channels];
        let mut dgamma = vec![0.0f32; self.channels];
        for n in 0..batch {
            for c in 0..self.channels {
                let off = (n * self.channels + c) * plane;
                for i in off..off + plane {
                    dbeta[c] += dy[i];
                    dgamma[c] += dy[i] * cache.xhat[i];
                }
            }
        }
        let g = self.gamma.value.data();
        let mut dx = vec![0.0; dy.len()];
        for n in 0..batch {
            for c in 0..self.channels {
                let k = g[c] * cache.inv_std[c] / count;
                let off = (n * self.channels + c) * plane;
                for i in off..off + plane {
                    dx[i] = k * (count * dy[i] - dbeta[c] - cache.xhat[i] * dgamma[c]);
                }
            }
        }
        self.gamma.grad = dgamma;
        self.beta.grad = dbeta;
        TensorF32::new(cache.dims, dx)
    }
}
