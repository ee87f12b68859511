//! Single-shot evaluation: Euclidean nearest-neighbour ranking and CMC
//! curves averaged over random probe/gallery splits.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{make_single_shot_split, DomainDataset, PreprocessConfig, SplitProtocol, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{Encoder, FeatureExtractor, GlobalModel};
use crate::rng::{derive_seed, rng_for, tag};
use crate::tensor::{euclidean, Tensor};
use crate::trainer::load_batch;

/// Row-major embeddings with per-row identity and camera.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub values: Vec<f64>,
    pub ids: Vec<usize>,
    pub cameras: Vec<u32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, values: Vec<f64>, ids: Vec<usize>, cameras: Vec<u32>) -> Result<Self> {
        if values.len() != dim * ids.len() || cameras.len() != ids.len() {
            return Err(Error::Shape(format!(
                "{} values, {} ids, {} cameras for dim {dim}",
                values.len(),
                ids.len(),
                cameras.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite embedding value in row {}", i / dim.max(1))));
        }
        Ok(EmbeddingMatrix { dim, values, ids, cameras })
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> EmbeddingMatrix {
        let mut values = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix {
            dim: self.dim,
            values,
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            cameras: idx.iter().map(|&i| self.cameras[i]).collect(),
        }
    }
}

/// Inference-mode `E(F(x))` for `indices` of `domain`, in input order.
pub fn extract_embeddings(
    extractor: &FeatureExtractor,
    encoder: &Encoder,
    domain: &DomainDataset,
    indices: &[usize],
    preprocess: &PreprocessConfig,
    batch_size: usize,
) -> Result<EmbeddingMatrix> {
    let dim = encoder.d_emb();
    let mut values = Vec::with_capacity(indices.len() * dim);
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = load_batch(domain, chunk, preprocess, None);
        let v = encoder.encode(&extractor.extract(&x)?)?;
        for (r, &idx) in chunk.iter().enumerate() {
            let row = v.row(r);
            if row.iter().any(|x| !x.is_finite()) {
                let s = domain.sample(idx);
                let name = s
                    .path
                    .as_ref()
                    .map_or_else(|| format!("{} sample {idx}", domain.name), |p| p.display().to_string());
                return Err(Error::Numeric(format!("non-finite embedding for image {name}")));
            }
        }
        values.extend_from_slice(v.data());
    }
    EmbeddingMatrix::new(
        dim,
        values,
        indices.iter().map(|&i| domain.sample(i).identity).collect(),
        indices.iter().map(|&i| domain.sample(i).camera).collect(),
    )
}

pub fn extract_all(model: &GlobalModel, domain: &DomainDataset, preprocess: &PreprocessConfig) -> Result<EmbeddingMatrix> {
    let all: Vec<usize> = (0..domain.num_images()).collect();
    extract_embeddings(&model.extractor, &model.encoder, domain, &all, preprocess, 32)
}

/// Gallery indices by ascending distance; ties by ascending index.
pub fn rank_gallery(probe: &[f64], gallery: &EmbeddingMatrix) -> Result<Vec<usize>> {
    if probe.len() != gallery.dim {
        return Err(Error::Shape(format!(
            "probe dim {} != gallery dim {}",
            probe.len(),
            gallery.dim
        )));
    }
    let d: Vec<f64> = (0..gallery.rows()).map(|g| euclidean(probe, gallery.row(g))).collect();
    let mut order: Vec<usize> = (0..gallery.rows()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    Ok(order)
}

/// Rank of the first correct match (1-based) in each ranked identity list.
pub fn match_ranks(rankings: &[Vec<usize>], probe_ids: &[usize]) -> Result<Vec<usize>> {
    if rankings.len() != probe_ids.len() {
        return Err(Error::Shape(format!(
            "{} rankings for {} probes",
            rankings.len(),
            probe_ids.len()
        )));
    }
    rankings
        .iter()
        .zip(probe_ids)
        .enumerate()
        .map(|(p, (r, id))| {
            r.iter()
                .position(|g| g == id)
                .map(|i| i + 1)
                .ok_or_else(|| Error::InvalidArgument(format!("probe {p} (identity {id}) has no gallery match")))
        })
        .collect()
}

/// `curve[k-1]` = fraction of probes whose true identity is within the top k.
pub fn compute_cmc(rankings: &[Vec<usize>], probe_ids: &[usize]) -> Result<Vec<f64>> {
    let ranks = match_ranks(rankings, probe_ids)?;
    let len = rankings.iter().map(Vec::len).max().unwrap_or(0);
    let mut curve = vec![0.0; len];
    for r in &ranks {
        curve[r - 1] += 1.0;
    }
    let n = ranks.len().max(1) as f64;
    let mut acc = 0.0;
    for c in &mut curve {
        acc += *c;
        *c = acc / n;
    }
    Ok(curve)
}

/// Mean average precision over probes (an extension to the rank-based
/// protocol; with a single true match per probe it equals the mean of 1/rank).
pub fn mean_average_precision(rankings: &[Vec<usize>], probe_ids: &[usize]) -> Result<f64> {
    match_ranks(rankings, probe_ids)?;
    let mut total = 0.0;
    for (r, id) in rankings.iter().zip(probe_ids) {
        let mut hits = 0.0;
        let mut ap = 0.0;
        for (i, g) in r.iter().enumerate() {
            if g == id {
                hits += 1.0;
                ap += hits / (i + 1) as f64;
            }
        }
        total += ap / hits;
    }
    Ok(total / probe_ids.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CMCResult {
    /// Mean over splits of rank-k accuracy, k = 1..gallery size.
    pub curve: Vec<f64>,
    pub per_split_rank1: Vec<f64>,
    pub mean_rank1: f64,
    pub split_seeds: Vec<u64>,
    /// Extension: mean average precision per split and its mean.
    pub per_split_map: Vec<f64>,
    pub mean_map: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_splits: usize,
    pub cross_camera: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_splits: 10,
            cross_camera: false,
        }
    }
}

pub fn split_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n).map(|s| derive_seed(seed, &[tag("eval-split"), s as u64])).collect()
}

/// Evaluate one split against precomputed embeddings of every image.
pub fn evaluate_split(embeddings: &EmbeddingMatrix, split: &SplitSpec, cross_camera: bool) -> Result<(Vec<f64>, f64)> {
    let g_idx: Vec<usize> = split.gallery.iter().map(|g| g.0).collect();
    let gallery = embeddings.select(&g_idx);
    let mut rankings = Vec::with_capacity(split.probe.len());
    for &(p, _) in &split.probe {
        let order = rank_gallery(embeddings.row(p), &gallery)?;
        let cam = embeddings.cameras[p];
        let ranked: Vec<usize> = order
            .into_iter()
            .filter(|&g| !cross_camera || gallery.cameras[g] != cam)
            .map(|g| gallery.ids[g])
            .collect();
        rankings.push(ranked);
    }
    let ids: Vec<usize> = split.probe.iter().map(|p| p.1).collect();
    let mut curve = compute_cmc(&rankings, &ids)?;
    curve.resize(gallery.rows(), 1.0);
    Ok((curve, mean_average_precision(&rankings, &ids)?))
}

/// Evaluate `n_splits` seeded splits; `embed` supplies the embeddings of
/// every image for a given split seed.
fn evaluate_with(
    target: &DomainDataset,
    protocol: SplitProtocol,
    opts: EvalOptions,
    seed: u64,
    mut embed: impl FnMut(u64) -> Result<EmbeddingMatrix>,
) -> Result<CMCResult> {
    if opts.n_splits == 0 {
        return Err(Error::InvalidArgument("n_splits must be >= 1".into()));
    }
    let seeds = split_seeds(seed, opts.n_splits);
    let mut curve = vec![0.0; protocol.gallery];
    let mut per_split_rank1 = Vec::with_capacity(seeds.len());
    let mut per_split_map = Vec::with_capacity(seeds.len());
    for &s in &seeds {
        let split = make_single_shot_split(target, protocol, s)?;
        let emb = embed(s)?;
        let (c, map) = evaluate_split(&emb, &split, opts.cross_camera)?;
        for (acc, v) in curve.iter_mut().zip(&c) {
            *acc += v;
        }
        per_split_rank1.push(c[0]);
        per_split_map.push(map);
    }
    let n = seeds.len() as f64;
    curve.iter_mut().for_each(|v| *v /= n);
    Ok(CMCResult {
        curve,
        mean_rank1: per_split_rank1.iter().sum::<f64>() / n,
        per_split_rank1,
        split_seeds: seeds,
        mean_map: per_split_map.iter().sum::<f64>() / n,
        per_split_map,
    })
}

/// Evaluate against embeddings computed once and shared by all splits.
pub fn evaluate_embeddings(
    embeddings: &EmbeddingMatrix,
    target: &DomainDataset,
    protocol: SplitProtocol,
    opts: EvalOptions,
    seed: u64,
) -> Result<CMCResult> {
    if embeddings.rows() != target.num_images() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} images",
            embeddings.rows(),
            target.num_images()
        )));
    }
    evaluate_with(target, protocol, opts, seed, |_| Ok(embeddings.clone()))
}

pub fn evaluate_target(
    model: &GlobalModel,
    target: &DomainDataset,
    protocol: SplitProtocol,
    opts: EvalOptions,
    preprocess: &PreprocessConfig,
    seed: u64,
) -> Result<CMCResult> {
    let emb = extract_all(model, target, preprocess)?;
    evaluate_embeddings(&emb, target, protocol, opts, seed)
}

/// Identity-agnostic null model: fresh standard-normal embeddings for every
/// split. Its expected rank-1 is exactly `1 / gallery identities`.
pub fn evaluate_null_model(
    target: &DomainDataset,
    protocol: SplitProtocol,
    opts: EvalOptions,
    dim: usize,
    seed: u64,
) -> Result<CMCResult> {
    evaluate_with(target, protocol, opts, seed, |s| {
        let mut rng = rng_for(s, &[tag("null-model")]);
        let n = target.num_images();
        let values = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        EmbeddingMatrix::new(
            dim,
            values,
            target.samples().iter().map(|x| x.identity).collect(),
            target.samples().iter().map(|x| x.camera).collect(),
        )
    })
}

/// Mean and standard error of the mean.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Distinct identities in a split's gallery.
pub fn gallery_identities(split: &SplitSpec) -> usize {
    split.gallery.iter().map(|g| g.1).collect::<std::collections::BTreeSet<_>>().len()
}

pub fn embeddings_from_tensor(t: &Tensor, ids: Vec<usize>, cameras: Vec<u32>) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::new(t.item_len(), t.data().to_vec(), ids, cameras)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::test_util::counted_domain;
    use proptest::prelude::*;

    fn matrix(rows: &[&[f64]]) -> EmbeddingMatrix {
        let dim = rows[0].len();
        EmbeddingMatrix::new(
            dim,
            rows.concat(),
            (0..rows.len()).collect(),
            vec![0; rows.len()],
        )
        .unwrap()
    }

    #[test]
    fn ranking_examples() {
        let g = matrix(&[&[9.0, 9.0], &[1.0, 1.0], &[5.0, 5.0], &[0.0, 0.0]]);
        assert_eq!(rank_gallery(&[0.0, 0.0], &g).unwrap()[0], 3);
        let g2 = matrix(&[&[5.0], &[2.0]]);
        assert_eq!(rank_gallery(&[0.0], &g2).unwrap(), vec![1, 0]);
        let tie = matrix(&[&[1.0], &[-1.0], &[1.0]]);
        assert_eq!(rank_gallery(&[0.0], &tie).unwrap(), vec![0, 1, 2]);
        assert!(rank_gallery(&[0.0, 1.0], &g2).is_err());
    }

    #[test]
    fn cmc_examples() {
        let curve = compute_cmc(&[vec![7, 1, 2], vec![1, 2, 8]], &[7, 8]).unwrap();
        assert_eq!(curve, vec![0.5, 0.5, 1.0]);
        let all_first = compute_cmc(&[vec![1, 0], vec![0, 1]], &[1, 0]).unwrap();
        assert_eq!(all_first, vec![1.0, 1.0]);
        assert!(compute_cmc(&[vec![1, 2]], &[3]).is_err());
        let ap = mean_average_precision(&[vec![7, 1, 2], vec![1, 2, 8]], &[7, 8]).unwrap();
        assert!((ap - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_extraction_is_empty() {
        let m = EmbeddingMatrix::new(4, vec![], vec![], vec![]).unwrap();
        assert_eq!(m.rows(), 0);
    }

    #[test]
    fn single_split_mean_and_determinism() {
        let d = counted_domain(0, 12, 3);
        let proto = SplitProtocol::half(&d);
        let opts = EvalOptions { n_splits: 1, cross_camera: false };
        let r = evaluate_null_model(&d, proto, opts, 4, 3).unwrap();
        assert_eq!(r.mean_rank1, r.per_split_rank1[0]);
        assert_eq!(evaluate_null_model(&d, proto, opts, 4, 3).unwrap(), r);
        assert_eq!(r.curve.len(), proto.gallery);
        assert_eq!(*r.curve.last().unwrap(), 1.0);
    }

    #[test]
    fn monotone_transform_leaves_result_unchanged() {
        let d = counted_domain(0, 10, 2);
        let mut rng = rng_for(1, &[]);
        let values: Vec<f64> = (0..d.num_images() * 3).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ids = d.samples().iter().map(|s| s.identity).collect::<Vec<_>>();
        let cams = d.samples().iter().map(|s| s.camera).collect::<Vec<_>>();
        let a = EmbeddingMatrix::new(3, values.clone(), ids.clone(), cams.clone()).unwrap();
        // uniform scaling multiplies every distance by the same positive factor
        let b = EmbeddingMatrix::new(3, values.iter().map(|v| v * 7.5).collect(), ids, cams).unwrap();
        let opts = EvalOptions { n_splits: 3, cross_camera: false };
        let proto = SplitProtocol::half(&d);
        assert_eq!(
            evaluate_embeddings(&a, &d, proto, opts, 2).unwrap(),
            evaluate_embeddings(&b, &d, proto, opts, 2).unwrap()
        );
    }

    #[test]
    fn cross_camera_filter_drops_same_camera_entries() {
        let m = EmbeddingMatrix::new(1, vec![0.0, 0.1, 0.2, 5.0], vec![0, 1, 0, 1], vec![0, 0, 1, 1]).unwrap();
        let split = SplitSpec {
            probe: vec![(0, 0)],
            gallery: vec![(1, 1), (2, 0)],
            seed: 0,
        };
        let (c, _) = evaluate_split(&m, &split, false).unwrap();
        assert_eq!(c[0], 0.0);
        let (c, _) = evaluate_split(&m, &split, true).unwrap();
        assert_eq!(c[0], 1.0);
    }

    proptest! {
        #[test]
        fn curve_is_monotone_and_bounded(ranks in proptest::collection::vec(proptest::collection::vec(0usize..20, 1..30), 1..20)) {
            let rankings: Vec<Vec<usize>> = ranks.iter().map(|r| {
                let mut v = r.clone();
                v.push(99);
                v
            }).collect();
            let ids = vec![99; rankings.len()];
            let c = compute_cmc(&rankings, &ids).unwrap();
            prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert_eq!(*c.last().unwrap(), 1.0);
        }
    }
}
