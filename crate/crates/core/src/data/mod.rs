//! Multi-domain re-identification data with disjoint identity spaces.

pub mod manifest;
pub mod preprocess;
pub mod split;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;

use crate::error::{Error, Result};

pub use manifest::{load_domain, write_manifest, ManifestRow};
pub use preprocess::{augment, augment_with, preprocess, preprocess_rgb, AugmentParams, Normalization, PreprocessConfig};
pub use split::{make_single_shot_split, SplitProtocol, SplitSpec};
pub use synthetic::{generate_synthetic_domains, SyntheticSpec, SyntheticSuite};

/// One pedestrian image.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub pixels: Arc<RgbImage>,
    /// Dense domain-local identity label.
    pub identity: usize,
    pub camera: u32,
    pub domain: usize,
    /// Label as written in the source manifest, before re-densification.
    pub original_identity: i64,
    pub path: Option<PathBuf>,
}

/// All images of one domain. Identities are dense (`0..num_identities`) and
/// each has at least two images.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub name: String,
    samples: Vec<ImageSample>,
    by_identity: Vec<Vec<usize>>,
}

impl DomainDataset {
    pub fn new(domain_id: usize, name: impl Into<String>, samples: Vec<ImageSample>) -> Result<Self> {
        let name = name.into();
        let ids: BTreeSet<usize> = samples.iter().map(|s| s.identity).collect();
        if let Some(&max) = ids.iter().next_back() {
            if max + 1 != ids.len() {
                return Err(Error::Validation(format!(
                    "domain {name}: identity labels are not dense (max {max}, {} distinct)",
                    ids.len()
                )));
            }
        }
        let mut by_identity = vec![Vec::new(); ids.len()];
        for (i, s) in samples.iter().enumerate() {
            if s.domain != domain_id {
                return Err(Error::Validation(format!(
                    "domain {name}: sample {i} carries domain {} instead of {domain_id}",
                    s.domain
                )));
            }
            by_identity[s.identity].push(i);
        }
        if let Some((id, imgs)) = by_identity.iter().enumerate().find(|(_, v)| v.len() < 2) {
            let orig = samples[imgs[0]].original_identity;
            return Err(Error::Validation(format!(
                "domain {name}: identity {id} (original {orig}) has {} image(s); at least 2 are required",
                imgs.len()
            )));
        }
        Ok(DomainDataset {
            domain_id,
            name,
            samples,
            by_identity,
        })
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn sample(&self, index: usize) -> &ImageSample {
        &self.samples[index]
    }

    pub fn num_identities(&self) -> usize {
        self.by_identity.len()
    }

    pub fn num_images(&self) -> usize {
        self.samples.len()
    }

    pub fn num_cameras(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.camera)
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Sample indices belonging to `identity`.
    pub fn images_of(&self, identity: usize) -> &[usize] {
        &self.by_identity[identity]
    }
}

/// Injective map from `(domain, local identity)` to a unified label space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalLabelMap {
    offsets: BTreeMap<usize, usize>,
    counts: BTreeMap<usize, usize>,
    total_identities: usize,
}

/// Offsets are cumulative identity counts in ascending domain-id order.
pub fn build_label_map(domains: &[DomainDataset]) -> Result<GlobalLabelMap> {
    if domains.is_empty() {
        return Err(Error::InvalidArgument("label map needs at least one domain".into()));
    }
    let mut counts = BTreeMap::new();
    for d in domains {
        if counts.insert(d.domain_id, d.num_identities()).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate domain id {}", d.domain_id)));
        }
    }
    Ok(GlobalLabelMap::from_counts(counts))
}

impl GlobalLabelMap {
    pub fn from_counts(counts: BTreeMap<usize, usize>) -> Self {
        let mut offsets = BTreeMap::new();
        let mut acc = 0;
        for (&d, &n) in &counts {
            offsets.insert(d, acc);
            acc += n;
        }
        GlobalLabelMap {
            offsets,
            counts,
            total_identities: acc,
        }
    }

    pub fn total_identities(&self) -> usize {
        self.total_identities
    }

    /// Offsets in ascending domain-id order.
    pub fn offsets(&self) -> Vec<usize> {
        self.offsets.values().copied().collect()
    }

    pub fn global(&self, domain: usize, local: usize) -> Result<usize> {
        let off = self
            .offsets
            .get(&domain)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown domain {domain}")))?;
        if local >= self.counts[&domain] {
            return Err(Error::InvalidArgument(format!(
                "identity {local} out of range for domain {domain}"
            )));
        }
        Ok(off + local)
    }
}

/// Labeled source domains plus their unified label map.
#[derive(Debug, Clone)]
pub struct SourceCollection {
    domains: Vec<DomainDataset>,
    label_map: GlobalLabelMap,
}

impl SourceCollection {
    pub fn new(mut domains: Vec<DomainDataset>) -> Result<Self> {
        let label_map = build_label_map(&domains)?;
        domains.sort_by_key(|d| d.domain_id);
        Ok(SourceCollection { domains, label_map })
    }

    pub fn domains(&self) -> &[DomainDataset] {
        &self.domains
    }

    pub fn domain(&self, index: usize) -> &DomainDataset {
        &self.domains[index]
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn label_map(&self) -> &GlobalLabelMap {
        &self.label_map
    }

    pub fn total_images(&self) -> usize {
        self.domains.iter().map(DomainDataset::num_images).sum()
    }
}


#[cfg(test)]
mod tests {
    use super::test_util::counted_domain;
    use super::*;

    #[test]
    fn label_map_offsets() {
        let ds = vec![counted_domain(0, 3, 2), counted_domain(1, 5, 2), counted_domain(2, 2, 2)];
        let map = build_label_map(&ds).unwrap();
        assert_eq!(map.offsets(), vec![0, 3, 8]);
        assert_eq!(map.total_identities(), 10);
        let single = build_label_map(&[counted_domain(4, 4, 2)]).unwrap();
        assert_eq!(single.offsets(), vec![0]);
        assert_eq!(single.total_identities(), 4);
    }

    #[test]
    fn label_map_is_injective() {
        let ds = vec![counted_domain(2, 4, 2), counted_domain(0, 3, 2), counted_domain(5, 6, 2)];
        let map = build_label_map(&ds).unwrap();
        let mut seen = BTreeSet::new();
        for d in &ds {
            for l in 0..d.num_identities() {
                assert!(seen.insert(map.global(d.domain_id, l).unwrap()));
            }
        }
        assert_eq!(seen.len(), map.total_identities());
        assert!(map.global(0, 3).is_err());
    }

    #[test]
    fn duplicate_domain_rejected() {
        assert!(build_label_map(&[counted_domain(1, 2, 2), counted_domain(1, 3, 2)]).is_err());
    }

    #[test]
    fn source_totals_match_published_statistics() {
        // Market1501, DukeMTMC-reID, CUHK02, CUHK03 identity counts
        let counts: BTreeMap<usize, usize> = [(0, 1501), (1, 1812), (2, 1816), (3, 1467)].into_iter().collect();
        assert_eq!(GlobalLabelMap::from_counts(counts).total_identities(), 6596);
    }

    #[test]
    fn single_image_identity_rejected() {
        let px = Arc::new(RgbImage::new(1, 1));
        let mk = |id| ImageSample {
            pixels: px.clone(),
            identity: id,
            camera: 0,
            domain: 0,
            original_identity: id as i64,
            path: None,
        };
        let err = DomainDataset::new(0, "x", vec![mk(0), mk(0), mk(1)]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
