use super::{join, Module, Param};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

/// Affine map `y = x·Wᵀ + b`, weight `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, std: f64, rng: &mut Rng) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: Param::normal(&[out_dim, in_dim], std, rng),
            bias: Param::filled(&[out_dim], 0.0),
        }
    }

    /// Fan-in scaled (He) initialization.
    pub fn he(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Linear::new(in_dim, out_dim, (2.0 / in_dim as f64).sqrt(), rng)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_dim {
            return Err(Error::Shape(format!(
                "linear expects [N, {}], got {:?}",
                self.in_dim,
                x.shape()
            )));
        }
        let n = x.batch();
        let mut y = Tensor::zeros(&[n, self.out_dim]);
        for i in 0..n {
            y.row_mut(i).copy_from_slice(&self.bias.value);
        }
        gemm(
            n,
            self.in_dim,
            self.out_dim,
            1.0,
            x.data(),
            self.in_dim as isize,
            1,
            &self.weight.value,
            1,
            self.in_dim as isize,
            1.0,
            y.data_mut(),
        );
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let n = x.batch();
        gemm(
            self.out_dim,
            n,
            self.in_dim,
            1.0,
            dy.data(),
            1,
            self.out_dim as isize,
            x.data(),
            self.in_dim as isize,
            1,
            1.0,
            &mut self.weight.grad,
        );
        for i in 0..n {
            for (g, d) in self.bias.grad.iter_mut().zip(dy.row(i)) {
                *g += d;
            }
        }
        need_dx.then(|| {
            let mut dx = Tensor::zeros(&[n, self.in_dim]);
            gemm(
                n,
                self.out_dim,
                self.in_dim,
                1.0,
                dy.data(),
                self.out_dim as isize,
                1,
                &self.weight.value,
                self.in_dim as isize,
                1,
                0.0,
                dx.data_mut(),
            );
            dx
        })
    }
}

impl Module for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng_for(2, &[]);
        let mut lin = Linear::he(4, 3, &mut rng);
        lin.bias = Param::normal(&[3], 1.0, &mut rng);
        let x = Tensor::from_vec(&[5, 4], Param::normal(&[20], 1.0, &mut rng).value).unwrap();
        let r = Param::normal(&[15], 1.0, &mut rng).value;
        let loss = |l: &Linear, x: &Tensor| -> f64 {
            l.forward(x).unwrap().data().iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let dy = Tensor::from_vec(&[5, 3], r.clone()).unwrap();
        let dx = lin.backward(&x, &dy, true).unwrap();
        let h = 1e-6;
        for i in 0..20 {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-7);
        }
        for i in 0..12 {
            let mut p = lin.clone();
            p.weight.value[i] += h;
            let mut m = lin.clone();
            m.weight.value[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - lin.weight.grad[i]).abs() < 1e-7);
        }
        let db: Vec<f64> = (0..3).map(|j| (0..5).map(|i| r[i * 3 + j]).sum()).collect();
        for j in 0..3 {
            assert!((db[j] - lin.bias.grad[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut rng = rng_for(2, &[]);
        let lin = Linear::he(4, 3, &mut rng);
        assert!(lin.forward(&Tensor::zeros(&[2, 5])).is_err());
    }
}
