//! Single-shot probe/gallery splits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DomainDataset;
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};

/// Probe and gallery image counts for one target protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitProtocol {
    pub probes: usize,
    pub gallery: usize,
}

impl SplitProtocol {
    pub const GRID: SplitProtocol = SplitProtocol { probes: 125, gallery: 1025 };
    pub const ILIDS: SplitProtocol = SplitProtocol { probes: 60, gallery: 60 };
    pub const PRID: SplitProtocol = SplitProtocol { probes: 100, gallery: 649 };
    pub const VIPER: SplitProtocol = SplitProtocol { probes: 316, gallery: 316 };

    pub fn named(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "grid" => Some(Self::GRID),
            "ilids" | "i-lids" => Some(Self::ILIDS),
            "prid" => Some(Self::PRID),
            "viper" => Some(Self::VIPER),
            _ => None,
        }
    }

    /// Half the identities as probes, one gallery image per identity.
    pub fn half(dataset: &DomainDataset) -> Self {
        let ids = dataset.num_identities();
        SplitProtocol {
            probes: ids / 2,
            gallery: ids,
        }
    }
}

/// Probe and gallery lists of `(sample index, identity)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub probe: Vec<(usize, usize)>,
    pub gallery: Vec<(usize, usize)>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("split serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }
}

/// Draw a single-shot split.
///
/// Each probe identity gets one probe image and exactly one gallery image
/// (a different camera when available). Remaining gallery slots are filled
/// with distractors from non-probe identities, one image per identity per
/// round. Gallery order is shuffled.
pub fn make_single_shot_split(dataset: &DomainDataset, protocol: SplitProtocol, seed: u64) -> Result<SplitSpec> {
    let ids = dataset.num_identities();
    if ids < 2 {
        return Err(Error::InvalidArgument("split needs at least two identities".into()));
    }
    if protocol.probes == 0 || protocol.probes > ids {
        return Err(Error::InvalidArgument(format!(
            "{} probes requested but dataset has {ids} identities",
            protocol.probes
        )));
    }
    if protocol.gallery < protocol.probes {
        return Err(Error::InvalidArgument("gallery smaller than probe set".into()));
    }
    let mut rng = rng_for(seed, &[tag("split")]);
    let mut order: Vec<usize> = (0..ids).collect();
    order.shuffle(&mut rng);
    let (probe_ids, rest) = order.split_at(protocol.probes);

    let distractors_needed = protocol.gallery - protocol.probes;
    let available: usize = rest.iter().map(|&id| dataset.images_of(id).len()).sum();
    if distractors_needed > available {
        return Err(Error::InvalidArgument(format!(
            "{distractors_needed} distractors requested but only {available} non-probe images exist"
        )));
    }

    let mut probe = Vec::with_capacity(protocol.probes);
    let mut gallery = Vec::with_capacity(protocol.gallery);
    for &id in probe_ids {
        let mut imgs = dataset.images_of(id).to_vec();
        imgs.shuffle(&mut rng);
        let p = imgs[0];
        let cam = dataset.sample(p).camera;
        let g = imgs[1..]
            .iter()
            .copied()
            .find(|&i| dataset.sample(i).camera != cam)
            .unwrap_or(imgs[1]);
        probe.push((p, id));
        gallery.push((g, id));
    }

    let mut pools: Vec<(usize, Vec<usize>)> = rest
        .iter()
        .map(|&id| {
            let mut imgs = dataset.images_of(id).to_vec();
            imgs.shuffle(&mut rng);
            (id, imgs)
        })
        .collect();
    let mut round = 0;
    while gallery.len() < protocol.gallery {
        for (id, imgs) in &mut pools {
            if gallery.len() == protocol.gallery {
                break;
            }
            if let Some(&img) = imgs.get(round) {
                gallery.push((img, *id));
            }
        }
        round += 1;
    }
    gallery.shuffle(&mut rng);
    Ok(SplitSpec { probe, gallery, seed })
}
