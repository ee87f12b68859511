//! Seeded generator of multi-domain pedestrian-like images.
//!
//! Each identity is a figure archetype (shirt and trouser colours, stripe
//! pattern, body proportions, optional bag). Each domain applies a global
//! style: background texture, hue rotation, saturation, contrast,
//! brightness and sensor noise. Held-out domains draw styles the source
//! domains never use, so a domain gap exists by construction.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{load_domain, write_manifest, ManifestRow};
use super::{DomainDataset, ImageSample, SourceCollection};
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub source_domains: usize,
    pub ids_per_domain: usize,
    pub images_per_id: usize,
    pub target_domains: usize,
    pub target_ids: usize,
    pub target_images_per_id: usize,
    pub height: usize,
    pub width: usize,
    pub cameras: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            source_domains: 3,
            ids_per_domain: 20,
            images_per_id: 8,
            target_domains: 1,
            target_ids: 80,
            target_images_per_id: 4,
            height: 128,
            width: 64,
            cameras: 2,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.source_domains < 3 {
            return Err(Error::Config("synthetic data needs at least 3 source domains".into()));
        }
        if self.images_per_id < 2 || (self.target_domains > 0 && self.target_images_per_id < 2) {
            return Err(Error::Config("every synthetic identity needs at least 2 images".into()));
        }
        if self.ids_per_domain < 2 || (self.target_domains > 0 && self.target_ids < 2) {
            return Err(Error::Config("every synthetic domain needs at least 2 identities".into()));
        }
        if self.height < 16 || self.width < 8 || self.cameras == 0 {
            return Err(Error::Config("synthetic images must be at least 16x8 with >= 1 camera".into()));
        }
        Ok(())
    }

    pub fn total_domains(&self) -> usize {
        self.source_domains + self.target_domains
    }
}

/// Generated data: source collection plus held-out target domains.
#[derive(Debug, Clone)]
pub struct SyntheticSuite {
    pub sources: SourceCollection,
    pub targets: Vec<DomainDataset>,
}

#[derive(Debug, Clone, Copy)]
enum Texture {
    VerticalGradient,
    Tiles,
    Checker,
    Blotches,
}

/// Global appearance of one domain.
#[derive(Debug, Clone, Copy)]
pub struct DomainStyle {
    hue_shift: f64,
    saturation: f64,
    contrast: f64,
    brightness: f64,
    noise: f64,
    background: [f64; 3],
    texture: Texture,
    texture_amp: f64,
    texture_period: f64,
}

/// Per-identity figure description.
#[derive(Debug, Clone, Copy)]
pub struct Archetype {
    shirt: [f64; 3],
    trousers: [f64; 3],
    skin: [f64; 3],
    stripe: Option<([f64; 3], bool)>,
    body_width: f64,
    body_height: f64,
    torso_frac: f64,
    bag: Option<[f64; 3]>,
}

/// Per-image placement.
#[derive(Debug, Clone, Copy)]
pub struct Pose {
    shift_x: f64,
    shift_y: f64,
    scale: f64,
    mirror: bool,
    bg_phase: f64,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(|v| v / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn random_color(rng: &mut Rng, sat: (f64, f64), val: (f64, f64)) -> [f64; 3] {
    hsv_to_rgb(
        rng.gen_range(0.0..360.0),
        rng.gen_range(sat.0..sat.1),
        rng.gen_range(val.0..val.1),
    )
}

impl DomainStyle {
    /// Source domains take evenly spaced hue rotations; held-out domains sit
    /// half-way between them and use a texture family offset from the
    /// sources'.
    fn draw(seed: u64, index: usize, spec: &SyntheticSpec) -> Self {
        let mut rng = rng_for(seed, &[tag("style"), index as u64]);
        let held_out = index >= spec.source_domains;
        let step = 360.0 / spec.source_domains as f64;
        let hue_shift = if held_out {
            step * ((index - spec.source_domains) as f64 + 0.5)
        } else {
            step * index as f64
        };
        let textures = [Texture::VerticalGradient, Texture::Tiles, Texture::Checker, Texture::Blotches];
        let texture = textures[(index + usize::from(held_out)) % textures.len()];
        DomainStyle {
            hue_shift: hue_shift + rng.gen_range(-10.0..10.0),
            saturation: rng.gen_range(0.6..1.3),
            contrast: rng.gen_range(0.7..1.3),
            brightness: rng.gen_range(-25.0..25.0),
            noise: rng.gen_range(2.0..6.0),
            background: random_color(&mut rng, (0.1, 0.6), (0.25, 0.85)),
            texture,
            texture_amp: rng.gen_range(12.0..35.0),
            texture_period: rng.gen_range(6.0..18.0),
        }
    }

    fn background_at(&self, x: f64, y: f64, h: f64, phase: f64) -> [f64; 3] {
        let p = self.texture_period;
        let t = match self.texture {
            Texture::VerticalGradient => (y / h - 0.5) * 2.0,
            Texture::Tiles => {
                if ((y + phase * p) / p).floor() as i64 % 2 == 0 { 1.0 } else { -1.0 }
            }
            Texture::Checker => {
                let a = ((x + phase * p) / p).floor() as i64;
                let b = (y / p).floor() as i64;
                if (a + b) % 2 == 0 { 1.0 } else { -1.0 }
            }
            Texture::Blotches => {
                ((x / p + phase * 6.0).sin() * (y / (1.7 * p)).cos() + (0.7 * x / p + y / p).sin()) / 2.0
            }
        };
        self.background.map(|c| c + self.texture_amp * t)
    }

    fn transform(&self, rgb: [f64; 3]) -> [f64; 3] {
        let (h, s, v) = rgb_to_hsv(rgb.map(|c| c.clamp(0.0, 255.0)));
        let shifted = hsv_to_rgb(h + self.hue_shift, (s * self.saturation).min(1.0), v);
        shifted.map(|c| (c - 128.0) * self.contrast + 128.0 + self.brightness)
    }
}

impl Archetype {
    fn draw(rng: &mut Rng) -> Self {
        const SKIN: [[f64; 3]; 4] = [
            [241.0, 194.0, 167.0],
            [198.0, 134.0, 99.0],
            [141.0, 85.0, 54.0],
            [224.0, 172.0, 105.0],
        ];
        let shirt = random_color(rng, (0.45, 1.0), (0.45, 1.0));
        let stripe = rng
            .gen_bool(0.5)
            .then(|| (random_color(rng, (0.0, 1.0), (0.1, 1.0)), rng.gen_bool(0.5)));
        let bag = rng.gen_bool(0.35).then(|| random_color(rng, (0.2, 0.9), (0.15, 0.8)));
        Archetype {
            shirt,
            trousers: random_color(rng, (0.15, 0.85), (0.15, 0.75)),
            skin: SKIN[rng.gen_range(0..SKIN.len())],
            stripe,
            body_width: rng.gen_range(0.30..0.50),
            body_height: rng.gen_range(0.72..0.90),
            torso_frac: rng.gen_range(0.38..0.55),
            bag,
        }
    }
}

impl Pose {
    fn draw(rng: &mut Rng) -> Self {
        Pose {
            shift_x: rng.gen_range(-0.06..0.06),
            shift_y: rng.gen_range(-0.04..0.04),
            scale: rng.gen_range(0.93..1.07),
            mirror: rng.gen_bool(0.5),
            bg_phase: rng.gen_range(0.0..1.0),
        }
    }
}

/// Figure colour (if any) at normalized coordinates `(u, v)` in `[0, 1]²`.
fn figure_color(a: &Archetype, pose: &Pose, u: f64, v: f64) -> Option<[f64; 3]> {
    let height = a.body_height * pose.scale;
    let width = a.body_width * pose.scale;
    let top = 0.5 - height / 2.0 + pose.shift_y;
    let cx = 0.5 + pose.shift_x;
    let rel_y = (v - top) / height;
    let mut rel_x = (u - cx) / width;
    if pose.mirror {
        rel_x = -rel_x;
    }
    if !(0.0..=1.0).contains(&rel_y) {
        return None;
    }
    let head = 0.16;
    if rel_y < head {
        let dy = (rel_y - head / 2.0) * height;
        let dx = rel_x * width;
        let r = head / 2.0 * height;
        return (dx * dx + (dy * 0.8).powi(2) <= r * r * 0.64).then_some(a.skin);
    }
    let torso_end = head + a.torso_frac * (1.0 - head);
    if rel_y < torso_end {
        if let Some(bag) = a.bag {
            if (0.5..0.68).contains(&rel_x) && rel_y > head + 0.1 && rel_y < torso_end + 0.05 {
                return Some(bag);
            }
        }
        if rel_x.abs() > 0.5 {
            return None;
        }
        if let Some((color, horizontal)) = a.stripe {
            let coord = if horizontal { rel_y * 14.0 } else { (rel_x + 0.5) * 6.0 };
            if coord.floor() as i64 % 2 == 0 {
                return Some(color);
            }
        }
        return Some(a.shirt);
    }
    // two legs with a gap
    let leg = rel_x.abs();
    (leg > 0.05 && leg < 0.4).then_some(a.trousers)
}

/// Render one image and its figure mask.
pub fn render(
    archetype: &Archetype,
    pose: &Pose,
    style: &DomainStyle,
    camera: usize,
    spec: &SyntheticSpec,
    noise_rng: &mut Rng,
) -> (RgbImage, Vec<bool>) {
    let (h, w) = (spec.height, spec.width);
    let illumination = [1.0, 0.82, 1.12, 0.9][camera % 4];
    let noise = Normal::new(0.0, style.noise).expect("positive noise");
    let mut img = RgbImage::new(w as u32, h as u32);
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let base = match figure_color(archetype, pose, u, v) {
                Some(c) => {
                    mask[y * w + x] = true;
                    c
                }
                None => style.background_at(x as f64, y as f64, h as f64, pose.bg_phase),
            };
            let lit = base.map(|c| c * illumination);
            let out = style.transform(lit);
            let px = out.map(|c| (c + noise.sample(noise_rng)).round().clamp(0.0, 255.0) as u8);
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    (img, mask)
}

fn generate_domain(seed: u64, index: usize, ids: usize, per_id: usize, spec: &SyntheticSpec) -> Result<DomainDataset> {
    let style = DomainStyle::draw(seed, index, spec);
    let mut samples = Vec::with_capacity(ids * per_id);
    for id in 0..ids {
        let archetype = Archetype::draw(&mut rng_for(seed, &[tag("identity"), index as u64, id as u64]));
        for m in 0..per_id {
            let mut rng = rng_for(seed, &[tag("image"), index as u64, id as u64, m as u64]);
            let pose = Pose::draw(&mut rng);
            let camera = m % spec.cameras;
            let (img, _) = render(&archetype, &pose, &style, camera, spec, &mut rng);
            samples.push(ImageSample {
                pixels: Arc::new(img),
                identity: id,
                camera: camera as u32,
                domain: index,
                original_identity: id as i64,
                path: None,
            });
        }
    }
    DomainDataset::new(index, format!("domain_{index}"), samples)
}

/// Generate source and held-out domains. Domain ids are `0..source_domains`
/// for sources and continue upward for targets.
pub fn generate_synthetic_domains(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticSuite> {
    spec.validate()?;
    let sources = (0..spec.source_domains)
        .map(|d| generate_domain(seed, d, spec.ids_per_domain, spec.images_per_id, spec))
        .collect::<Result<Vec<_>>>()?;
    let targets = (0..spec.target_domains)
        .map(|t| {
            generate_domain(
                seed,
                spec.source_domains + t,
                spec.target_ids,
                spec.target_images_per_id,
                spec,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticSuite {
        sources: SourceCollection::new(sources)?,
        targets,
    })
}

/// Index file written next to the generated domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionIndex {
    pub seed: u64,
    pub spec: SyntheticSpec,
    pub sources: Vec<String>,
    pub targets: Vec<String>,
}

pub const INDEX_FILE: &str = "collection.json";
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Summary row: domain name, cameras, identities, images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub name: String,
    pub role: String,
    pub cameras: usize,
    pub identities: usize,
    pub images: usize,
}

impl SyntheticSuite {
    pub fn summary(&self) -> Vec<DomainSummary> {
        let row = |d: &DomainDataset, role: &str| DomainSummary {
            name: d.name.clone(),
            role: role.to_string(),
            cameras: d.num_cameras(),
            identities: d.num_identities(),
            images: d.num_images(),
        };
        self.sources
            .domains()
            .iter()
            .map(|d| row(d, "source"))
            .chain(self.targets.iter().map(|d| row(d, "target")))
            .collect()
    }

    /// Write `domain_<k>/id_<n>/img_<m>.png`, one manifest per domain and
    /// the collection index.
    pub fn write(&self, dir: &Path, spec: &SyntheticSpec, seed: u64) -> Result<()> {
        let all = self.sources.domains().iter().chain(&self.targets);
        for d in all {
            let ddir = dir.join(&d.name);
            let mut rows = Vec::with_capacity(d.num_images());
            let mut counters = vec![0usize; d.num_identities()];
            for s in d.samples() {
                let m = counters[s.identity];
                counters[s.identity] += 1;
                let rel = format!("id_{}/img_{m}.png", s.identity);
                let path = ddir.join(&rel);
                let parent = path.parent().expect("has parent");
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                s.pixels.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
                rows.push(ManifestRow {
                    path: rel,
                    identity: s.identity as i64,
                    camera: s.camera,
                });
            }
            write_manifest(&ddir.join(MANIFEST_FILE), &rows)?;
        }
        let index = CollectionIndex {
            seed,
            spec: *spec,
            sources: self.sources.domains().iter().map(|d| d.name.clone()).collect(),
            targets: self.targets.iter().map(|d| d.name.clone()).collect(),
        };
        let p = dir.join(INDEX_FILE);
        fs::write(&p, serde_json::to_string_pretty(&index).expect("index serializes")).map_err(|e| Error::io(&p, e))
    }
}

pub fn read_index(dir: &Path) -> Result<CollectionIndex> {
    let p = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))
}

/// Manifest paths of a generated collection, sources first.
pub fn manifest_paths(dir: &Path, index: &CollectionIndex) -> (Vec<PathBuf>, Vec<PathBuf>) {
    let m = |n: &String| dir.join(n).join(MANIFEST_FILE);
    (index.sources.iter().map(m).collect(), index.targets.iter().map(m).collect())
}

/// Reload a generated collection from disk.
pub fn load_suite(dir: &Path) -> Result<SyntheticSuite> {
    let index = read_index(dir)?;
    let (src, tgt) = manifest_paths(dir, &index);
    let sources = src
        .iter()
        .enumerate()
        .map(|(i, p)| load_domain(p, i))
        .collect::<Result<Vec<_>>>()?;
    let targets = tgt
        .iter()
        .enumerate()
        .map(|(i, p)| load_domain(p, index.sources.len() + i))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticSuite {
        sources: SourceCollection::new(sources)?,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            ids_per_domain: 4,
            images_per_id: 3,
            target_ids: 5,
            target_images_per_id: 2,
            height: 32,
            width: 16,
            ..Default::default()
        }
    }

    #[test]
    fn default_counts() {
        let spec = SyntheticSpec::default();
        let suite = generate_synthetic_domains(&spec, 0).unwrap();
        assert_eq!(suite.sources.total_images(), 480);
        assert_eq!(suite.sources.len(), 3);
        assert_eq!(suite.sources.label_map().total_identities(), 60);
        assert_eq!(suite.targets.len(), 1);
        assert_eq!(suite.targets[0].domain_id, 3);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic_domains(&small(), 5).unwrap();
        let b = generate_synthetic_domains(&small(), 5).unwrap();
        let c = generate_synthetic_domains(&small(), 6).unwrap();
        let px = |s: &SyntheticSuite| -> Vec<Vec<u8>> {
            s.sources.domains().iter().flat_map(|d| d.samples().iter().map(|x| x.pixels.as_raw().clone())).collect()
        };
        assert_eq!(px(&a), px(&b));
        assert_ne!(px(&a), px(&c));
    }

    #[test]
    fn rejects_too_few_images() {
        let spec = SyntheticSpec { images_per_id: 1, ..small() };
        assert!(generate_synthetic_domains(&spec, 0).is_err());
        let spec = SyntheticSpec { source_domains: 2, ..small() };
        assert!(generate_synthetic_domains(&spec, 0).is_err());
    }

    #[test]
    fn domain_gap_exceeds_within_domain_background_variation() {
        let spec = SyntheticSpec::default();
        let seed = 0;
        let mut cross = Vec::new();
        let mut within = Vec::new();
        for id in 0..10u64 {
            let a = Archetype::draw(&mut rng_for(seed, &[tag("gap-id"), id]));
            let b = Archetype::draw(&mut rng_for(seed, &[tag("gap-id"), id + 100]));
            let pose = Pose::draw(&mut rng_for(seed, &[tag("gap-pose"), id]));
            for d in 0..spec.source_domains {
                let s1 = DomainStyle::draw(seed, d, &spec);
                let s2 = DomainStyle::draw(seed, (d + 1) % spec.total_domains(), &spec);
                let mut r = rng_for(seed, &[1, id, d as u64]);
                let (i1, m1) = render(&a, &pose, &s1, 0, &spec, &mut r);
                let (i2, _) = render(&a, &pose, &s2, 0, &spec, &mut r);
                let (j1, n1) = render(&b, &pose, &s1, 0, &spec, &mut r);
                let diff = |p: &RgbImage, q: &RgbImage, keep: &dyn Fn(usize) -> bool| -> f64 {
                    let mut acc = 0.0;
                    let mut n = 0.0;
                    for (k, (u, v)) in p.as_raw().chunks(3).zip(q.as_raw().chunks(3)).enumerate() {
                        if keep(k) {
                            acc += u.iter().zip(v).map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs()).sum::<f64>() / 3.0;
                            n += 1.0;
                        }
                    }
                    acc / n
                };
                cross.push(diff(&i1, &i2, &|_| true));
                within.push(diff(&i1, &j1, &|k| !m1[k] && !n1[k]));
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&cross) > mean(&within), "cross {} within {}", mean(&cross), mean(&within));
    }

    #[test]
    fn write_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        let suite = generate_synthetic_domains(&spec, 1).unwrap();
        suite.write(dir.path(), &spec, 1).unwrap();
        let back = load_suite(dir.path()).unwrap();
        assert_eq!(back.summary(), suite.summary());
        let a = suite.targets[0].sample(3).pixels.as_raw();
        let b = back.targets[0].sample(3).pixels.as_raw();
        assert_eq!(a, b);
        assert!(dir.path().join("domain_0/id_2/img_1.png").is_file());
    }

    #[test]
    fn hsv_round_trip() {
        for &c in &[[255.0, 0.0, 0.0], [10.0, 200.0, 100.0], [30.0, 30.0, 30.0]] {
            let (h, s, v) = rgb_to_hsv(c);
            let back = hsv_to_rgb(h, s, v);
            for k in 0..3 {
                assert!((back[k] - c[k]).abs() < 1e-9);
            }
        }
    }
}
