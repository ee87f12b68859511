//! Training objectives on embedding batches.
//!
//! Every loss here is a mean over batch rows, and every `*_with_grad`
//! variant returns the gradient of that mean with respect to its inputs.
//! Distances are plain (non-squared) Euclidean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{euclidean, Tensor};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingMode {
    /// `1 − ε` on the true class, `ε / (C − 1)` on each other class.
    #[default]
    OffClass,
    /// `(1 − ε)·onehot + ε / C` everywhere.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_tri: f64,
    pub lambda_consis: f64,
    pub margin: f64,
    pub smoothing: f64,
    #[serde(default)]
    pub smoothing_mode: SmoothingMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_tri: 0.2,
            lambda_consis: 0.01,
            margin: 0.3,
            smoothing: 0.1,
            smoothing_mode: SmoothingMode::OffClass,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_tri, self.lambda_consis, self.margin, self.smoothing];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        if self.lambda_tri < 0.0 || self.lambda_consis < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.margin <= 0.0 {
            return Err(Error::Config("triplet margin must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config("label smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, d] => Ok((n, d)),
        _ => Err(Error::Shape(format!("{what} must be [N, D], got {:?}", t.shape()))),
    }
}

/// Mean Euclidean distance between matched rows of two embedding batches.
pub fn consistency_loss(v_j: &Tensor, v_k: &Tensor) -> Result<f64> {
    Ok(consistency_loss_with_grad(v_j, v_k)?.0)
}

pub fn consistency_loss_with_grad(v_j: &Tensor, v_k: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    let (n, _) = matrix_dims(v_j, "consistency input")?;
    if v_j.shape() != v_k.shape() {
        return Err(Error::Shape(format!(
            "consistency inputs differ: {:?} vs {:?}",
            v_j.shape(),
            v_k.shape()
        )));
    }
    let mut dj = Tensor::zeros(v_j.shape());
    let mut dk = Tensor::zeros(v_k.shape());
    if n == 0 {
        return Ok((0.0, dj, dk));
    }
    let mut total = 0.0;
    for i in 0..n {
        let (a, b) = (v_j.row(i), v_k.row(i));
        let d = euclidean(a, b);
        total += d;
        if d > 0.0 {
            for (c, (x, y)) in a.iter().zip(b).enumerate() {
                let g = (x - y) / (d * n as f64);
                dj.row_mut(i)[c] = g;
                dk.row_mut(i)[c] = -g;
            }
        }
    }
    Ok((total / n as f64, dj, dk))
}

/// Anchor–positive and anchor–negative distances.
pub fn pair_distances(anchor: &[f64], positive: &[f64], negative: &[f64]) -> Result<(f64, f64)> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(Error::Shape(format!(
            "embedding dimensions differ: {}, {}, {}",
            anchor.len(),
            positive.len(),
            negative.len()
        )));
    }
    Ok((euclidean(anchor, positive), euclidean(anchor, negative)))
}

/// Hardest positive and negative chosen for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinedTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub d_pos: f64,
    pub d_neg: f64,
}

fn check_mining_labels(labels: &[usize]) -> Result<()> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::InvalidArgument(
            "batch-hard mining needs at least two distinct labels".into(),
        ));
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::InvalidArgument(format!(
            "label {l} has a single instance; no positive exists"
        )));
    }
    Ok(())
}

/// For every anchor pick the farthest same-label row and the nearest
/// different-label row. Ties resolve to the lowest index.
pub fn mine_batch_hard(embeddings: &Tensor, labels: &[usize]) -> Result<Vec<MinedTriplet>> {
    let (n, _) = matrix_dims(embeddings, "embeddings")?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), n)));
    }
    check_mining_labels(labels)?;
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(embeddings.row(i), embeddings.row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    Ok((0..n)
        .map(|a| {
            let mut pos = (usize::MAX, f64::NEG_INFINITY);
            let mut neg = (usize::MAX, f64::INFINITY);
            for j in 0..n {
                let d = dist[a * n + j];
                if labels[j] == labels[a] {
                    if j != a && d > pos.1 {
                        pos = (j, d);
                    }
                } else if d < neg.1 {
                    neg = (j, d);
                }
            }
            MinedTriplet {
                anchor: a,
                positive: pos.0,
                negative: neg.0,
                d_pos: pos.1,
                d_neg: neg.1,
            }
        })
        .collect())
}

pub fn batch_hard_triplet_loss(embeddings: &Tensor, labels: &[usize], margin: f64) -> Result<f64> {
    Ok(batch_hard_triplet_loss_with_grad(embeddings, labels, margin)?.0)
}

pub fn batch_hard_triplet_loss_with_grad(
    embeddings: &Tensor,
    labels: &[usize],
    margin: f64,
) -> Result<(f64, Tensor)> {
    let mined = mine_batch_hard(embeddings, labels)?;
    let n = mined.len() as f64;
    let mut grad = Tensor::zeros(embeddings.shape());
    let mut total = 0.0;
    for t in &mined {
        let hinge = margin + t.d_pos - t.d_neg;
        if hinge <= 0.0 {
            continue;
        }
        total += hinge;
        let a = embeddings.row(t.anchor).to_vec();
        if t.d_pos > 0.0 {
            let p = embeddings.row(t.positive).to_vec();
            for c in 0..a.len() {
                let g = (a[c] - p[c]) / (t.d_pos * n);
                grad.row_mut(t.anchor)[c] += g;
                grad.row_mut(t.positive)[c] -= g;
            }
        }
        if t.d_neg > 0.0 {
            let q = embeddings.row(t.negative).to_vec();
            for c in 0..a.len() {
                let g = (a[c] - q[c]) / (t.d_neg * n);
                grad.row_mut(t.anchor)[c] -= g;
                grad.row_mut(t.negative)[c] += g;
            }
        }
    }
    Ok((total / n, grad))
}

/// Smoothed target distribution for one row.
pub fn smoothed_target(label: usize, classes: usize, eps: f64, mode: SmoothingMode) -> Vec<f64> {
    let (on, off) = match mode {
        SmoothingMode::OffClass if classes > 1 => (1.0 - eps, eps / (classes - 1) as f64),
        SmoothingMode::OffClass => (1.0, 0.0),
        SmoothingMode::Uniform => (1.0 - eps + eps / classes as f64, eps / classes as f64),
    };
    let mut t = vec![off; classes];
    t[label] = on;
    t
}

pub fn smoothed_cross_entropy(
    probabilities: &Tensor,
    labels: &[usize],
    eps: f64,
    mode: SmoothingMode,
) -> Result<f64> {
    Ok(smoothed_cross_entropy_with_grad(probabilities, labels, eps, mode)?.0)
}

/// Returns the loss and its gradient with respect to the probabilities.
pub fn smoothed_cross_entropy_with_grad(
    probabilities: &Tensor,
    labels: &[usize],
    eps: f64,
    mode: SmoothingMode,
) -> Result<(f64, Tensor)> {
    let (n, classes) = matrix_dims(probabilities, "probabilities")?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), n)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!("smoothing {eps} outside [0, 1)")));
    }
    let mut grad = Tensor::zeros(probabilities.shape());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let target = smoothed_target(label, classes, eps, mode);
        for (c, &t) in target.iter().enumerate() {
            if t == 0.0 {
                continue;
            }
            let p = probabilities.row(i)[c];
            total -= t * p.max(PROB_FLOOR).ln();
            if p > PROB_FLOOR {
                grad.row_mut(i)[c] = -t / (p * n as f64);
            }
        }
    }
    Ok((total / n as f64, grad))
}

/// `L_cls + λ_tri·L_tri + λ_consis·L_consis`.
pub fn total_loss(cls: f64, tri: f64, consis: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("classification", cls), ("triplet", tri), ("consistency", consis)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidArgument(format!("{name} loss must be finite and >= 0, got {v}")));
        }
    }
    Ok(cls + w.lambda_tri * tri + w.lambda_consis * consis)
}
