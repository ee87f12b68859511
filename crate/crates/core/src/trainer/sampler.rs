//! Episode sampling: a distinct domain triple and a P×K identity-balanced
//! batch from the first domain of the triple.

use std::sync::Once;

use rand::seq::index;
use rand::Rng as _;

use crate::data::{DomainDataset, SourceCollection};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeBatch {
    /// Indices into the collection's domain list.
    pub i: usize,
    pub j: usize,
    pub k: usize,
    /// Sample indices within domain `i`, grouped by identity.
    pub samples: Vec<usize>,
    pub local_labels: Vec<usize>,
    pub global_labels: Vec<usize>,
}

static REPLACEMENT_WARNING: Once = Once::new();

/// `p` identities without replacement, then `k` images of each (with
/// replacement only when an identity has fewer than `k` images).
pub fn sample_pk(domain: &DomainDataset, p: usize, k: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let ids = domain.num_identities();
    if p < 2 || k < 2 {
        return Err(Error::InvalidArgument(format!("P and K must be >= 2, got P={p}, K={k}")));
    }
    if ids < p {
        return Err(Error::InvalidArgument(format!(
            "domain {} has {ids} identities, fewer than P={p}",
            domain.name
        )));
    }
    let mut samples = Vec::with_capacity(p * k);
    let mut labels = Vec::with_capacity(p * k);
    for id in index::sample(rng, ids, p).into_iter() {
        let imgs = domain.images_of(id);
        if imgs.len() >= k {
            samples.extend(index::sample(rng, imgs.len(), k).into_iter().map(|t| imgs[t]));
        } else {
            REPLACEMENT_WARNING.call_once(|| {
                log::warn!(
                    "identity {id} of domain {} has {} images < K={k}; sampling with replacement",
                    domain.name,
                    imgs.len()
                )
            });
            samples.extend((0..k).map(|_| imgs[rng.gen_range(0..imgs.len())]));
        }
        labels.extend(std::iter::repeat(id).take(k));
    }
    Ok((samples, labels))
}

pub fn sample_triple(n: usize, rng: &mut Rng) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "episodic training needs at least 3 source domains, got {n}"
        )));
    }
    let i = rng.gen_range(0..n);
    let mut j = rng.gen_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    let (lo, hi) = (i.min(j), i.max(j));
    let mut k = rng.gen_range(0..n - 2);
    if k >= lo {
        k += 1;
    }
    if k >= hi {
        k += 1;
    }
    Ok((i, j, k))
}

pub fn sample_episode(collection: &SourceCollection, p: usize, k: usize, rng: &mut Rng) -> Result<EpisodeBatch> {
    let (i, j, kk) = sample_triple(collection.len(), rng)?;
    let domain = collection.domain(i);
    let (samples, local_labels) = sample_pk(domain, p, k, rng)?;
    let global_labels = local_labels
        .iter()
        .map(|&l| collection.label_map().global(domain.domain_id, l))
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodeBatch {
        i,
        j,
        k: kk,
        samples,
        local_labels,
        global_labels,
    })
}
