//! Experiment configuration.
//!
//! TOML with sections `[data]`, `[model]`, `[train]`, `[eval]`,
//! `[ablation]` plus top-level `seed`, `out` and `preset`. Values resolve in
//! order: preset defaults, config file, environment, command line. Every key
//! can be overridden through `DGREID_<SECTION>_<KEY>` (nested tables add one
//! segment per level, e.g. `DGREID_DATA_SYNTHETIC_IDS_PER_DOMAIN`); top-level
//! keys use `DGREID_<KEY>`. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::data::{Normalization, PreprocessConfig, SplitProtocol, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, ModelConfig};
use crate::trainer::{TrainConfig, Variant};

pub const ENV_PREFIX: &str = "DGREID";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Synthetic data, tiny backbone, 15/10 epochs.
    Desk,
    /// 150 epochs with the drop at 100, residual backbone.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Manifests,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSection {
    pub height: usize,
    pub width: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub pad: usize,
    pub flip_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Manifests of labeled source domains (manifest mode).
    pub source_manifests: Vec<PathBuf>,
    /// Manifests of held-out target domains (manifest mode).
    pub target_manifests: Vec<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub preprocess: PreprocessSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Tiny,
    Resnet50,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneKind,
    /// Must equal the backbone's output width (2048 for the residual one).
    pub d_feat: usize,
    pub d_emb: usize,
    pub encoder_hidden: usize,
    /// Tiny backbone: average-pool factor applied to the input.
    pub stem_pool: usize,
    /// Instance normalization in the early blocks of the global extractor.
    pub instance_norm_global: bool,
    /// Same for the per-domain extractors.
    pub instance_norm_domain: bool,
    /// Optional archive of `F.*` entries used to initialize every extractor;
    /// empty means random initialization.
    pub init_weights: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub n_splits: usize,
    /// `half`, `grid`, `ilids`, `prid`, `viper` or `custom`.
    pub protocol: String,
    /// Used when `protocol = "custom"`.
    pub probes: usize,
    pub gallery: usize,
    pub cross_camera: bool,
    /// Run `eval` on these target names only; empty means every target.
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub disable_tri: bool,
    pub disable_consis: bool,
    pub baseline_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let norm = Normalization::default();
        let pre = PreprocessConfig::default();
        let desk = preset == Preset::Desk;
        ExperimentConfig {
            preset,
            seed: 0,
            out: PathBuf::from(if desk { "runs/desk" } else { "runs/full" }),
            data: DataSection {
                source: if desk { DataSource::Synthetic } else { DataSource::Manifests },
                source_manifests: Vec::new(),
                target_manifests: Vec::new(),
                synthetic: SyntheticSpec::default(),
                preprocess: PreprocessSection {
                    height: pre.height,
                    width: pre.width,
                    mean: norm.mean,
                    std: norm.std,
                    pad: pre.pad,
                    flip_prob: pre.flip_prob,
                },
            },
            model: ModelSection {
                backbone: if desk { BackboneKind::Tiny } else { BackboneKind::Resnet50 },
                d_feat: if desk { 64 } else { 2048 },
                d_emb: if desk { 32 } else { 512 },
                encoder_hidden: if desk { 32 } else { 512 },
                stem_pool: 4,
                instance_norm_global: true,
                instance_norm_domain: false,
                init_weights: String::new(),
            },
            train: if desk { TrainConfig::desk() } else { TrainConfig::default() },
            eval: EvalSection {
                n_splits: 10,
                protocol: "half".into(),
                probes: 0,
                gallery: 0,
                cross_camera: false,
                targets: Vec::new(),
            },
            ablation: AblationSection::default(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        let p = &self.data.preprocess;
        PreprocessConfig {
            height: p.height,
            width: p.width,
            norm: Normalization { mean: p.mean, std: p.std },
            pad: p.pad,
            flip_prob: p.flip_prob,
        }
    }

    pub fn global_backbone(&self) -> BackboneConfig {
        let m = &self.model;
        let p = &self.data.preprocess;
        match m.backbone {
            BackboneKind::Tiny => BackboneConfig::tiny_with(p.height, p.width, m.stem_pool, m.d_feat, m.instance_norm_global),
            BackboneKind::Resnet50 => match BackboneConfig::resnet50(m.instance_norm_global) {
                BackboneConfig::Residual { blocks, base_width, instance_norm, .. } => BackboneConfig::Residual {
                    input_height: p.height,
                    input_width: p.width,
                    blocks,
                    base_width,
                    instance_norm,
                },
                other => other,
            },
        }
    }

    pub fn domain_backbone(&self) -> BackboneConfig {
        self.global_backbone().with_instance_norm(self.model.instance_norm_domain)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.global_backbone(),
            d_emb: self.model.d_emb,
            encoder_hidden: self.model.encoder_hidden,
        }
    }

    /// Variant selected by the ablation flags.
    pub fn variant(&self) -> Variant {
        let a = &self.ablation;
        match (a.baseline_only, a.disable_tri, a.disable_consis) {
            (true, _, _) => Variant::Baseline,
            (false, true, false) => Variant::NoTri,
            (false, false, true) => Variant::NoConsis,
            _ => Variant::Full,
        }
    }

    pub fn protocol_for(&self, target: &crate::data::DomainDataset) -> Result<SplitProtocol> {
        match self.eval.protocol.as_str() {
            "half" => Ok(SplitProtocol::half(target)),
            "custom" => Ok(SplitProtocol {
                probes: self.eval.probes,
                gallery: self.eval.gallery,
            }),
            name => SplitProtocol::named(name)
                .ok_or_else(|| Error::Config(format!("unknown eval protocol {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.ablation;
        if a.disable_tri && a.disable_consis && !a.baseline_only {
            return Err(Error::Config(
                "disable_tri and disable_consis together are not a defined variant; use baseline_only".into(),
            ));
        }
        if a.baseline_only && (a.disable_tri || a.disable_consis) {
            return Err(Error::Config("baseline_only cannot be combined with the other ablation flags".into()));
        }
        self.train.validate()?;
        let m = self.model_config();
        m.validate()?;
        if m.d_feat() != self.model.d_feat {
            return Err(Error::Config(format!(
                "model.d_feat = {} but the {:?} backbone produces {}",
                self.model.d_feat,
                self.model.backbone,
                m.d_feat()
            )));
        }
        let p = &self.data.preprocess;
        if p.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || p.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("preprocess mean must be finite and std positive".into()));
        }
        if !(0.0..=1.0).contains(&p.flip_prob) {
            return Err(Error::Config("flip_prob must lie in [0, 1]".into()));
        }
        match self.data.source {
            DataSource::Synthetic => self.data.synthetic.validate()?,
            DataSource::Manifests => {
                if self.data.source_manifests.len() < 3 && self.variant() != Variant::Baseline {
                    return Err(Error::Config("episodic training needs at least 3 source manifests".into()));
                }
            }
        }
        if self.eval.n_splits == 0 {
            return Err(Error::Config("eval.n_splits must be >= 1".into()));
        }
        if !matches!(self.eval.protocol.as_str(), "half" | "custom") && SplitProtocol::named(&self.eval.protocol).is_none() {
            return Err(Error::Config(format!("unknown eval protocol {:?}", self.eval.protocol)));
        }
        Ok(())
    }

    /// SHA-256 of the effective config with the output directory removed, so
    /// identical experiments written to different places hash the same.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn write_effective(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

/// Command-line values that take precedence over everything else.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn merge(base: &mut Table, over: &Table, path: &str) -> Result<()> {
    for (k, v) in over {
        let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o, &key)?,
            (Some(_), Value::Table(_)) | (Some(Value::Table(_)), _) => {
                return Err(Error::Config(format!("{key}: table/value mismatch")));
            }
            (Some(slot), _) => *slot = v.clone(),
            (None, _) => return Err(Error::Config(format!("unknown config key {key}"))),
        }
    }
    Ok(())
}

fn parse_env_value(raw: &str, like: &Value) -> Value {
    if let Value::String(_) = like {
        return Value::String(raw.to_string());
    }
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn apply_env(table: &mut Table, prefix: &str, env: &dyn Fn(&str) -> Option<String>) {
    for (k, v) in table.iter_mut() {
        let name = format!("{prefix}_{}", k.to_ascii_uppercase());
        if let Value::Table(t) = v {
            apply_env(t, &name, env);
        } else if let Some(raw) = env(&name) {
            *v = parse_env_value(&raw, v);
        }
    }
}

fn preset_of(table: &Table) -> Result<Option<Preset>> {
    match table.get("preset") {
        None => Ok(None),
        Some(v) => v
            .clone()
            .try_into()
            .map(Some)
            .map_err(|e| Error::Config(format!("preset: {e}"))),
    }
}

/// Resolve the effective configuration. `env` maps variable names to values
/// (normally `std::env::var`).
pub fn resolve(
    file: Option<&Path>,
    env: &dyn Fn(&str) -> Option<String>,
    cli: &CliOverrides,
) -> Result<ExperimentConfig> {
    let file_table: Table = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            text.parse().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    let env_preset = env(&format!("{ENV_PREFIX}_PRESET"))
        .map(|raw| {
            Value::String(raw)
                .try_into::<Preset>()
                .map_err(|e| Error::Config(format!("{ENV_PREFIX}_PRESET: {e}")))
        })
        .transpose()?;
    let preset = env_preset.or(preset_of(&file_table)?).unwrap_or(Preset::Desk);

    let mut table: Table = Table::try_from(ExperimentConfig::preset(preset)).expect("defaults serialize");
    merge(&mut table, &file_table, "")?;
    table.insert("preset".into(), Value::try_from(preset).expect("preset serializes"));
    apply_env(&mut table, ENV_PREFIX, env);
    let mut cfg: ExperimentConfig = Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(e.to_string()))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    // relative manifest paths are relative to the config file
    if let Some(dir) = file.and_then(Path::parent) {
        for m in cfg.data.source_manifests.iter_mut().chain(cfg.data.target_manifests.iter_mut()) {
            if m.is_relative() {
                *m = dir.join(&*m);
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn process_env(name: &str) -> Option<String> {
    std::env::var(name).ok()
}
