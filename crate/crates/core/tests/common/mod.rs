//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the library's math.

#![allow(dead_code)]

use dgreid::losses::SmoothingMode;
use dgreid::model::{freeze, FeatureExtractor, FrozenExtractor, GlobalModel, ModelConfig};
use dgreid::model::BackboneConfig;
use dgreid::nn::Module;
use dgreid::tensor::Tensor;
use dgreid::trainer::episode_gradients;
use dgreid::losses::LossWeights;
use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s.sqrt()
}

pub fn consistency(vj: &[Vec<f64>], vk: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for (a, b) in vj.iter().zip(vk) {
        s += dist(a, b);
    }
    s / vj.len() as f64
}

/// Mean over anchors of the worst hinge over every (positive, negative) pair.
pub fn triplet_enumerated(rows: &[Vec<f64>], labels: &[usize], m: f64) -> f64 {
    let n = rows.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut worst = 0.0f64;
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] == labels[a] {
                    continue;
                }
                let h = m + dist(&rows[a], &rows[p]) - dist(&rows[a], &rows[q]);
                worst = worst.max(h);
            }
        }
        total += worst;
    }
    total / n as f64
}

/// Hardest positive/negative per anchor by scanning all pairs; ties go to the
/// lowest index.
pub fn mine_enumerated(rows: &[Vec<f64>], labels: &[usize]) -> Vec<(usize, usize)> {
    let n = rows.len();
    (0..n)
        .map(|a| {
            let mut best_p = None::<(usize, f64)>;
            let mut best_n = None::<(usize, f64)>;
            for j in 0..n {
                let d = dist(&rows[a], &rows[j]);
                if labels[j] == labels[a] && j != a {
                    if best_p.map_or(true, |(_, bd)| d > bd) {
                        best_p = Some((j, d));
                    }
                } else if labels[j] != labels[a] && best_n.map_or(true, |(_, bd)| d < bd) {
                    best_n = Some((j, d));
                }
            }
            (best_p.unwrap().0, best_n.unwrap().0)
        })
        .collect()
}

/// Label-smoothed cross-entropy straight from logits via log-sum-exp.
pub fn smoothed_ce_from_logits(logits: &[Vec<f64>], labels: &[usize], eps: f64, mode: SmoothingMode) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let c = row.len();
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
        for (k, z) in row.iter().enumerate() {
            let t = match mode {
                SmoothingMode::OffClass => {
                    if k == y {
                        1.0 - eps
                    } else {
                        eps / (c - 1) as f64
                    }
                }
                SmoothingMode::Uniform => {
                    if k == y {
                        1.0 - eps + eps / c as f64
                    } else {
                        eps / c as f64
                    }
                }
            };
            total -= t * (z - lse);
        }
    }
    total / logits.len() as f64
}

pub fn softmax_rows(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|r| {
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|z| (z - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Gallery order by a full sort on (distance, index).
pub fn rank_sorted(probe: &[f64], gallery: &[Vec<f64>]) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = gallery.iter().enumerate().map(|(i, g)| (dist(probe, g), i)).collect();
    idx.sort_by(|a, b| a.partial_cmp(b).unwrap());
    idx.into_iter().map(|(_, i)| i).collect()
}

/// CMC by counting, for every k, the probes whose first true match is at rank ≤ k.
pub fn cmc_counted(ranked_ids: &[Vec<usize>], probe_ids: &[usize]) -> Vec<f64> {
    let g = ranked_ids[0].len();
    (1..=g)
        .map(|k| {
            let hits = ranked_ids
                .iter()
                .zip(probe_ids)
                .filter(|(r, p)| r[..k].contains(p))
                .count();
            hits as f64 / probe_ids.len() as f64
        })
        .collect()
}

pub fn random_rows(r: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| r.gen_range(-scale..scale)).collect()).collect()
}

/// Labels with every class appearing at least twice and at least two classes.
pub fn random_labels(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    assert!(n >= 4);
    let classes = r.gen_range(2..=n / 2);
    let mut labels: Vec<usize> = (0..classes).flat_map(|c| [c, c]).collect();
    while labels.len() < n {
        labels.push(r.gen_range(0..classes));
    }
    for i in (1..labels.len()).rev() {
        let j = r.gen_range(0..=i);
        labels.swap(i, j);
    }
    labels
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

/// Small model plus two frozen extractors for gradient checks.
pub struct GradFixture {
    pub model: GlobalModel,
    pub f_j: FrozenExtractor,
    pub f_k: FrozenExtractor,
    pub x: Tensor,
    pub local: Vec<usize>,
    pub global: Vec<usize>,
    pub weights: LossWeights,
}

pub fn grad_fixture(seed: u64) -> GradFixture {
    let (h, w) = (16, 8);
    let config = ModelConfig {
        backbone: BackboneConfig::tiny_with(h, w, 1, 8, true),
        d_emb: 4,
        encoder_hidden: 6,
    };
    let model = GlobalModel::new(config, 6, seed).unwrap();
    let domain = BackboneConfig::tiny_with(h, w, 1, 8, false);
    let mut r = rng(seed ^ 0xabcdef);
    let f_j = freeze(FeatureExtractor::new(domain.clone(), &mut r).unwrap());
    let f_k = freeze(FeatureExtractor::new(domain, &mut r).unwrap());
    let n = 6;
    let data: Vec<f64> = (0..n * 3 * h * w).map(|_| r.gen_range(-1.0..1.0)).collect();
    let x = Tensor::from_vec(&[n, 3, h, w], data).unwrap();
    GradFixture {
        model,
        f_j,
        f_k,
        x,
        local: vec![0, 0, 1, 1, 2, 2],
        global: vec![3, 3, 0, 0, 5, 5],
        weights: LossWeights::default(),
    }
}

pub struct GradReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_abs: f64,
    /// Scalars whose step-`h` difference straddled a kink (ReLU, max-pool
    /// or mining switch) and were re-measured with finer steps.
    pub refined: usize,
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central differences of `L_total` against the analytic gradient for every
/// scalar of F and E. Relative error is |a − n| / max(|a|, |n|, floor).
///
/// A central difference is only a valid reference where the loss is smooth
/// on [θ − h, θ + h]. When the step-`h` estimate misses `bound`, it is
/// recomputed at h/10 and h/100; the finer value replaces it only if those
/// two agree with each other within `bound` (the interval no longer holds a
/// kink). The analytic value is then judged against it with the same bound.
pub fn grad_check(fx: &GradFixture, h: f64, floor: f64, bound: f64) -> GradReport {
    let total = |m: &GlobalModel| {
        let mut m = m.clone();
        episode_gradients(&mut m, &fx.f_j, &fx.f_k, &fx.x, &fx.local, &fx.global, &fx.weights)
            .unwrap()
            .total
    };
    let mut base = fx.model.clone();
    episode_gradients(&mut base, &fx.f_j, &fx.f_k, &fx.x, &fx.local, &fx.global, &fx.weights).unwrap();
    let mut report = GradReport {
        checked: 0,
        worst_rel: 0.0,
        worst_abs: 0.0,
        refined: 0,
    };
    for part in 0..2 {
        let analytic = if part == 0 {
            base.extractor.flat_grads()
        } else {
            base.encoder.flat_grads()
        };
        let diff = |i: usize, step: f64| {
            let mut plus = fx.model.clone();
            let mut minus = fx.model.clone();
            let (mp, mm): (&mut dyn Module, &mut dyn Module) = if part == 0 {
                (&mut plus.extractor, &mut minus.extractor)
            } else {
                (&mut plus.encoder, &mut minus.encoder)
            };
            mp.with_param_scalar(i, &mut |v| *v += step);
            mm.with_param_scalar(i, &mut |v| *v -= step);
            (total(&plus) - total(&minus)) / (2.0 * step)
        };
        for (i, &a) in analytic.iter().enumerate() {
            let mut num = diff(i, h);
            if rel_err(a, num, floor) > bound {
                let fine = diff(i, h / 10.0);
                let finer = diff(i, h / 100.0);
                if rel_err(fine, finer, floor) <= bound {
                    num = fine;
                    report.refined += 1;
                }
            }
            report.worst_rel = report.worst_rel.max(rel_err(a, num, floor));
            report.worst_abs = report.worst_abs.max((a - num).abs());
            report.checked += 1;
        }
    }
    report
}

/// Dataset whose samples share one 1×1 image; for split and counting tests.
pub fn counted_domain(domain_id: usize, ids: usize, per_id: usize) -> dgreid::data::DomainDataset {
    let px = std::sync::Arc::new(image::RgbImage::new(1, 1));
    let samples = (0..ids)
        .flat_map(|id| {
            let px = px.clone();
            (0..per_id).map(move |k| dgreid::data::ImageSample {
                pixels: px.clone(),
                identity: id,
                camera: (k % 2) as u32,
                domain: domain_id,
                original_identity: id as i64,
                path: None,
            })
        })
        .collect();
    dgreid::data::DomainDataset::new(domain_id, format!("d{domain_id}"), samples).unwrap()
}
