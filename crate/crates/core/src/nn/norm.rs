use super::{join, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Statistics over (batch, spatial); running estimates used at inference.
    Batch,
    /// Statistics per (item, channel) over spatial positions; identical in
    /// both modes.
    Instance,
}

/// Affine normalization over inputs shaped `[N, C, ...]`.
#[derive(Debug, Clone)]
pub struct Norm {
    pub kind: NormKind,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NormTrace {
    xhat: Tensor,
    /// One entry per statistics group: `C` for batch norm, `N·C` for
    /// instance norm.
    inv_std: Vec<f64>,
}

impl Norm {
    pub fn new(kind: NormKind, channels: usize) -> Self {
        Norm {
            kind,
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::filled(&[channels], 0.0),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn batch(channels: usize) -> Self {
        Norm::new(NormKind::Batch, channels)
    }

    pub fn instance(channels: usize) -> Self {
        Norm::new(NormKind::Instance, channels)
    }

    fn dims(&self, x: &Tensor) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() < 2 || s[1] != self.channels {
            return Err(Error::Shape(format!(
                "norm expects [N, {}, ...], got {:?}",
                self.channels, s
            )));
        }
        Ok((s[0], x.item_len() / self.channels))
    }

    /// Apply `f` to every flat index belonging to group `(n, c)`; for batch
    /// norm `n` ranges over the whole batch.
    fn group_indices(
        &self,
        n_items: usize,
        spatial: usize,
        item: Option<usize>,
        c: usize,
    ) -> impl Iterator<Item = usize> {
        let channels = self.channels;
        let items = match item {
            Some(n) => n..n + 1,
            None => 0..n_items,
        };
        items.flat_map(move |n| {
            let base = (n * channels + c) * spatial;
            base..base + spatial
        })
    }

    fn groups(&self, n_items: usize) -> Vec<(Option<usize>, usize)> {
        match self.kind {
            NormKind::Batch => (0..self.channels).map(|c| (None, c)).collect(),
            NormKind::Instance => (0..n_items)
                .flat_map(|n| (0..self.channels).map(move |c| (Some(n), c)))
                .collect(),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor, update_running: bool) -> Result<(Tensor, NormTrace)> {
        let (n, spatial) = self.dims(x)?;
        let mut y = Tensor::zeros(x.shape());
        let mut xhat = Tensor::zeros(x.shape());
        let groups = self.groups(n);
        let mut inv_std = Vec::with_capacity(groups.len());
        for &(item, c) in &groups {
            let count = self.group_indices(n, spatial, item, c).count() as f64;
            let mean = self
                .group_indices(n, spatial, item, c)
                .map(|i| x.data()[i])
                .sum::<f64>()
                / count;
            let var = self
                .group_indices(n, spatial, item, c)
                .map(|i| (x.data()[i] - mean).powi(2))
                .sum::<f64>()
                / count;
            let istd = 1.0 / (var + self.eps).sqrt();
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for i in self.group_indices(n, spatial, item, c) {
                let h = (x.data()[i] - mean) * istd;
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = g * h + b;
            }
            inv_std.push(istd);
            if self.kind == NormKind::Batch && update_running {
                let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                let m = self.momentum;
                self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean;
                self.running_var[c] = (1.0 - m) * self.running_var[c] + m * unbiased;
            }
        }
        Ok((y, NormTrace { xhat, inv_std }))
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        match self.kind {
            NormKind::Instance => {
                let mut probe = self.clone();
                Ok(probe.forward_train(x, false)?.0)
            }
            NormKind::Batch => {
                let (n, spatial) = self.dims(x)?;
                let mut y = Tensor::zeros(x.shape());
                for c in 0..self.channels {
                    let istd = 1.0 / (self.running_var[c] + self.eps).sqrt();
                    let (g, b, m) = (self.gamma.value[c], self.beta.value[c], self.running_mean[c]);
                    for i in self.group_indices(n, spatial, None, c) {
                        y.data_mut()[i] = g * (x.data()[i] - m) * istd + b;
                    }
                }
                Ok(y)
            }
        }
    }

    pub fn backward(&mut self, trace: &NormTrace, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let n = dy.batch();
        let spatial = dy.item_len() / self.channels;
        let mut dx = need_dx.then(|| Tensor::zeros(dy.shape()));
        for (gi, (item, c)) in self.groups(n).into_iter().enumerate() {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            let mut count = 0.0;
            for i in self.group_indices(n, spatial, item, c) {
                sum_dy += dy.data()[i];
                sum_dy_xhat += dy.data()[i] * trace.xhat.data()[i];
                count += 1.0;
            }
            self.gamma.grad[c] += sum_dy_xhat;
            self.beta.grad[c] += sum_dy;
            if let Some(dx) = dx.as_mut() {
                let scale = self.gamma.value[c] * trace.inv_std[gi] / count;
                for i in self.group_indices(n, spatial, item, c) {
                    dx.data_mut()[i] = scale
                        * (count * dy.data()[i] - sum_dy - trace.xhat.data()[i] * sum_dy_xhat);
                }
            }
        }
        dx
    }
}

impl Module for Norm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        if self.kind == NormKind::Batch {
            f(&join(prefix, "running_mean"), &self.running_mean);
            f(&join(prefix, "running_var"), &self.running_var);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        if self.kind == NormKind::Batch {
            f(&join(prefix, "running_mean"), &mut self.running_mean);
            f(&join(prefix, "running_var"), &mut self.running_var);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn check_grads(mut norm: Norm, shape: &[usize]) {
        let mut rng = rng_for(11, &[]);
        let len: usize = shape.iter().product();
        norm.gamma = Param::normal(&[norm.channels], 1.0, &mut rng);
        norm.beta = Param::normal(&[norm.channels], 1.0, &mut rng);
        let x = Tensor::from_vec(shape, Param::normal(&[len], 2.0, &mut rng).value).unwrap();
        let r = Param::normal(&[len], 1.0, &mut rng).value;
        let loss = |nm: &Norm, x: &Tensor| -> f64 {
            let mut nm = nm.clone();
            let (y, _) = nm.forward_train(x, false).unwrap();
            y.data().iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let (_, tr) = norm.forward_train(&x, false).unwrap();
        let dy = Tensor::from_vec(shape, r.clone()).unwrap();
        let dx = norm.backward(&tr, &dy, true).unwrap();
        let h = 1e-6;
        for i in 0..len {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&norm, &xp) - loss(&norm, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6, "dx[{i}] fd={fd} an={}", dx.data()[i]);
        }
        for c in 0..norm.channels {
            let mut p = norm.clone();
            p.gamma.value[c] += h;
            let mut m = norm.clone();
            m.gamma.value[c] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - norm.gamma.grad[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_gradients() {
        check_grads(Norm::batch(3), &[4, 3, 2, 2]);
        check_grads(Norm::batch(5), &[6, 5]);
    }

    #[test]
    fn instance_norm_gradients() {
        check_grads(Norm::instance(2), &[3, 2, 3, 2]);
    }

    #[test]
    fn running_stats_track_batch_moments() {
        let mut bn = Norm::batch(1);
        let x = Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        bn.forward_train(&x, true).unwrap();
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-15);
        // unbiased variance 5/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
        let before = bn.running_mean.clone();
        bn.forward_train(&x, false).unwrap();
        assert_eq!(before, bn.running_mean);
    }

    #[test]
    fn instance_norm_is_mode_independent() {
        let mut rng = rng_for(1, &[]);
        let mut inorm = Norm::instance(2);
        let x = Tensor::from_vec(&[2, 2, 3, 3], Param::normal(&[36], 1.0, &mut rng).value).unwrap();
        let a = inorm.forward_train(&x, true).unwrap().0;
        let b = inorm.forward_eval(&x).unwrap();
        assert_eq!(a, b);
    }
}
