use super::{join, Module, Param};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

/// 2-D convolution without bias (always followed by a normalization layer).
/// Weight layout `[out_c, in_c * k * k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Conv2d {
    /// Fan-in scaled normal initialization.
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        let fan_in = in_c * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            weight: Param::normal(&[out_c, fan_in], std, rng),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_c {
            return Err(Error::Shape(format!(
                "conv expects [N, {}, H, W], got {:?}",
                self.in_c, s
            )));
        }
        if s[2] + 2 * self.pad < self.kernel || s[3] + 2 * self.pad < self.kernel {
            return Err(Error::Shape(format!("input {:?} smaller than kernel", s)));
        }
        let (ho, wo) = self.output_hw(s[2], s[3]);
        Ok(Geometry {
            c: s[1],
            h: s[2],
            w: s[3],
            ho,
            wo,
        })
    }

    fn im2col(&self, g: &Geometry, x: &[f64], cols: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let npix = g.ho * g.wo;
        for ci in 0..g.c {
            let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let out = &mut cols[row * npix..(row + 1) * npix];
                    for oy in 0..g.ho {
                        let iy = (oy * s + ki) as isize - p;
                        let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                        if iy < 0 || iy >= g.h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p;
                            *d = if ix < 0 || ix >= g.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, g: &Geometry, cols: &[f64], dx: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let npix = g.ho * g.wo;
        for ci in 0..g.c {
            let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * npix..(row + 1) * npix];
                    for oy in 0..g.ho {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * s + kj) as isize - p;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += src[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let n = x.batch();
        let kk = g.c * self.kernel * self.kernel;
        let npix = g.ho * g.wo;
        let mut y = Tensor::zeros(&[n, self.out_c, g.ho, g.wo]);
        let mut cols = vec![0.0; kk * npix];
        for i in 0..n {
            self.im2col(&g, x.row(i), &mut cols);
            gemm(
                self.out_c,
                kk,
                npix,
                1.0,
                &self.weight.value,
                kk as isize,
                1,
                &cols,
                npix as isize,
                1,
                0.0,
                y.row_mut(i),
            );
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let g = self.geometry(x).expect("trace shape checked on forward");
        let n = x.batch();
        let kk = g.c * self.kernel * self.kernel;
        let npix = g.ho * g.wo;
        let mut cols = vec![0.0; kk * npix];
        let mut dcols = vec![0.0; kk * npix];
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        for i in 0..n {
            self.im2col(&g, x.row(i), &mut cols);
            let dyi = dy.row(i);
            gemm(
                self.out_c,
                npix,
                kk,
                1.0,
                dyi,
                npix as isize,
                1,
                &cols,
                1,
                npix as isize,
                1.0,
                &mut self.weight.grad,
            );
            if let Some(dx) = dx.as_mut() {
                gemm(
                    kk,
                    self.out_c,
                    npix,
                    1.0,
                    &self.weight.value,
                    1,
                    kk as isize,
                    dyi,
                    npix as isize,
                    1,
                    0.0,
                    &mut dcols,
                );
                self.col2im(&g, &dcols, dx.row_mut(i));
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn naive_conv(c: &Conv2d, x: &Tensor) -> Tensor {
        let s = x.shape();
        let (ho, wo) = c.output_hw(s[2], s[3]);
        let mut y = Tensor::zeros(&[s[0], c.out_c, ho, wo]);
        for n in 0..s[0] {
            for oc in 0..c.out_c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..c.in_c {
                            for ki in 0..c.kernel {
                                for kj in 0..c.kernel {
                                    let iy = (oy * c.stride + ki) as isize - c.pad as isize;
                                    let ix = (ox * c.stride + kj) as isize - c.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= s[2] as isize || ix >= s[3] as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((n * s[1] + ic) * s[2] + iy as usize) * s[3] + ix as usize];
                                    let wv = c.weight.value[(oc * c.in_c + ic) * c.kernel * c.kernel + ki * c.kernel + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        y.data_mut()[((n * c.out_c + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = rng_for(3, &[]);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (7, 2, 3), (1, 2, 0)] {
            let conv = Conv2d::new(3, 5, k, s, p, &mut rng);
            let x = Tensor::from_vec(
                &[2, 3, 9, 6],
                Param::normal(&[2 * 3 * 9 * 6], 1.0, &mut rng).value,
            )
            .unwrap();
            let a = conv.forward(&x).unwrap();
            let b = naive_conv(&conv, &x);
            assert_eq!(a.shape(), b.shape());
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng_for(4, &[]);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let x = Tensor::from_vec(&[2, 2, 5, 4], Param::normal(&[80], 1.0, &mut rng).value).unwrap();
        let y = conv.forward(&x).unwrap();
        let r = Param::normal(&[y.len()], 1.0, &mut rng).value;
        let dy = Tensor::from_vec(y.shape(), r.clone()).unwrap();
        let dx = conv.backward(&x, &dy, true).unwrap();
        let loss = |c: &Conv2d, x: &Tensor| -> f64 {
            c.forward(x).unwrap().data().iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in [0, 7, 33, 79] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-7, "dx[{i}]");
        }
        for i in [0, 5, 20, 53] {
            let mut cp = conv.clone();
            cp.weight.value[i] += h;
            let mut cm = conv.clone();
            cm.weight.value[i] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - conv.weight.grad[i]).abs() < 1e-7, "dw[{i}]");
        }
    }
}
