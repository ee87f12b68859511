use crate::data::{augment, preprocess_rgb, DomainDataset, PreprocessConfig};
use crate::rng::{rng_for, tag};
use crate::tensor::Tensor;

/// Where augmentation randomness comes from: one stream per
/// `(seed, scope, iteration, slot)`, so batches never depend on load order.
#[derive(Debug, Clone, Copy)]
pub struct AugmentStream {
    pub seed: u64,
    pub scope: u64,
    pub iteration: u64,
}

/// Preprocess (and optionally augment) samples into a `[B, 3, H, W]` batch.
pub fn load_batch(
    domain: &DomainDataset,
    indices: &[usize],
    cfg: &PreprocessConfig,
    augmentation: Option<AugmentStream>,
) -> Tensor {
    let item = 3 * cfg.height * cfg.width;
    let mut data = Vec::with_capacity(indices.len() * item);
    for (slot, &idx) in indices.iter().enumerate() {
        let img = preprocess_rgb(&domain.sample(idx).pixels, cfg);
        let img = match augmentation {
            Some(a) => {
                let mut rng = rng_for(a.seed, &[tag("augment"), a.scope, a.iteration, slot as u64]);
                augment(&img, cfg, &mut rng)
            }
            None => img,
        };
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(&[indices.len(), 3, cfg.height, cfg.width], data).expect("batch size matches")
}
