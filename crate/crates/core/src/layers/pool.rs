use super::stale_cache;
use crate::error::{Error, Result};
use crate::tensor::{TensorF32, Window};

#[derive(Debug, Clone)]
pub struct MaxPool {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    /// Flat input index of each output's maximum, and the input dims.
    pub(crate) cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool {
    pub fn new(kernel: (usize, usize), stride: (usize, usize)) -> Self {
        MaxPool {
            kernel,
            stride,
            cache: None,
        }
    }

    fn pool(&self, x: &TensorF32) -> Result<(TensorF32, Vec<usize>)> {
        let &[b, c, h, w] = x.dims() else {
            return Err(Error::shape(format!("maxpool needs [batch, c, h, w], got {:?}", x.dims())));
        };
        let (oh, ow) = Window::new(self.kernel, self.stride, (0, 0)).output_hw(h, w)?;
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let src = x.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * sh * w + ox * sw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let i = base + (oy * sh + ky) * w + ox * sw + kx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        Ok((TensorF32::new([b, c, oh, ow], out)?, argmax))
    }

    pub(crate) fn forward_infer(&self, x: &TensorF32) -> Result<TensorF32> {
        Ok(self.pool(x)?.0)
    }

    pub(crate) fn forward_train(&mut self, x: &TensorF32) -> Result<TensorF32> {
        let (y, argmax) = self.pool(x)?;
        self.cache = Some((argmax, x.dims().to_vec()));
        Ok(y)
    }

    pub(crate) fn backward(&mut self, grad: &TensorF32) -> Result<TensorF32> {
        let (argmax, dims) = self.cache.take().ok_or_else(|| stale_cache("maxpool"))?;
        let mut dx = vec![0.0; dims.iter().product()];
        for (&i, &g) in argmax.iter().zip(grad.data()) {
            dx[i] += g;
        }
        TensorF32::new(dims, dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let p = MaxPool::new((2, 2), (2, 2));
        let x = TensorF32::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(p.forward_infer(&x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn gradient_routes_to_max() {
        let mut p = MaxPool::new((2, 2), (2, 2));
        let x = TensorF32::new([1, 1, 2, 4], vec![1.0, 5.0, 0.0, 0.0, 3.0, 4.0, 9.0, 0.0]).unwrap();
        p.forward_train(&x).unwrap();
        let dx = p.backward(&TensorF32::new([1, 1, 1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }
}
