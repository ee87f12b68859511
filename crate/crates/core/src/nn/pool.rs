use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn nchw(x: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Shape(format!("{what} expects [N, C, H, W], got {:?}", x.shape()))),
    }
}

/// Non-overlapping `k×k` average pooling.
pub(crate) fn avg_pool_forward(x: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, h, w) = nchw(x, "avg pool")?;
    if h % k != 0 || w % k != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by pool {k}")));
    }
    let (ho, wo) = (h / k, w / k);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let norm = 1.0 / (k * k) as f64;
    let src = x.data();
    let dst = y.data_mut();
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for dy in 0..k {
                    let row = (plane * h + oy * k + dy) * w + ox * k;
                    acc += src[row..row + k].iter().sum::<f64>();
                }
                dst[(plane * ho + oy) * wo + ox] = acc * norm;
            }
        }
    }
    Ok(y)
}

pub(crate) fn avg_pool_backward(in_shape: &[usize], dy: &Tensor, k: usize) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (h / k, w / k);
    let mut dx = Tensor::zeros(in_shape);
    let norm = 1.0 / (k * k) as f64;
    let planes = in_shape[0] * in_shape[1];
    for plane in 0..planes {
        for y in 0..h {
            for x in 0..w {
                dx.data_mut()[(plane * h + y) * w + x] = dy.data()[(plane * ho + y / k) * wo + x / k] * norm;
            }
        }
    }
    dx
}

pub(crate) fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = nchw(x, "global pool")?;
    let hw = h * w;
    let mut y = Tensor::zeros(&[n, c]);
    for (plane, v) in y.data_mut().iter_mut().enumerate() {
        *v = x.data()[plane * hw..(plane + 1) * hw].iter().sum::<f64>() / hw as f64;
    }
    Ok(y)
}

pub(crate) fn global_avg_pool_backward(in_shape: &[usize], dy: &Tensor) -> Tensor {
    let hw = in_shape[2] * in_shape[3];
    let mut dx = Tensor::zeros(in_shape);
    for (plane, g) in dy.data().iter().enumerate() {
        dx.data_mut()[plane * hw..(plane + 1) * hw]
            .iter_mut()
            .for_each(|v| *v = g / hw as f64);
    }
    dx
}

/// Max pooling with implicit `-inf` padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool {
    /// Returns the pooled tensor and, per output, the flat input index of
    /// the selected maximum (first occurrence wins on ties).
    pub(crate) fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let (n, c, h, w) = nchw(x, "max pool")?;
        let ho = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        let mut y = Tensor::zeros(&[n, c, ho, wo]);
        let mut arg = vec![0; n * c * ho * wo];
        for plane in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = (plane * h + iy as usize) * w + ix as usize;
                            if x.data()[idx] > best || best_i == usize::MAX {
                                best = x.data()[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    y.data_mut()[o] = best;
                    arg[o] = best_i;
                }
            }
        }
        Ok((y, arg))
    }

    pub(crate) fn backward(in_shape: &[usize], argmax: &[usize], dy: &Tensor) -> Tensor {
        let mut dx = Tensor::zeros(in_shape);
        for (o, &i) in argmax.iter().enumerate() {
            dx.data_mut()[i] += dy.data()[o];
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_pool_averages_blocks() {
        let x = Tensor::from_vec(&[1, 1, 2, 4], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let y = avg_pool_forward(&x, 2).unwrap();
        assert_eq!(y.data(), &[3.5, 5.5]);
        let dx = avg_pool_backward(x.shape(), &Tensor::from_vec(&[1, 1, 1, 2], vec![4.0, 8.0]).unwrap(), 2);
        assert_eq!(dx.data(), &[1., 1., 2., 2., 1., 1., 2., 2.]);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1., 9., 3., 4.]).unwrap();
        let mp = MaxPool { kernel: 3, stride: 2, pad: 1 };
        let (y, arg) = mp.forward(&x).unwrap();
        assert_eq!(y.data(), &[9.0]);
        let dx = MaxPool::backward(x.shape(), &arg, &Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap());
        assert_eq!(dx.data(), &[0., 2., 0., 0.]);
    }

    #[test]
    fn global_pool_means_planes() {
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![1., 3., 10., 20.]).unwrap();
        assert_eq!(global_avg_pool_forward(&x).unwrap().data(), &[2.0, 15.0]);
    }
}
