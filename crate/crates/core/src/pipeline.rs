//! The five pipeline commands and the on-disk layout they share:
//!
//! ```text
//! <out>/config.effective.toml
//! <out>/data/domain_<k>/id_<n>/img_<m>.png, manifest.csv, collection.json
//! <out>/stage1/F_<domain>.ckpt, pretrain_report.json
//! <out>/runs/<variant>/stage2/epoch_<n>.ckpt, final.ckpt, train_log.{txt,jsonl}, loss_curve.svg
//! <out>/runs/<variant>/eval/results.json, cmc_<target>.svg
//! <out>/results.json, summary.txt        (reproduce)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig};
use crate::data::synthetic::{load_suite, read_index, DomainSummary};
use crate::data::{generate_synthetic_domains, load_domain, DomainDataset, SourceCollection, SplitProtocol};
use crate::error::{Error, Result};
use crate::eval::{evaluate_target, CMCResult, EvalOptions};
use crate::model::checkpoint::{file_sha256, Archive};
use crate::model::{freeze, load_extractor, FeatureExtractor, FrozenExtractor, GlobalModel};
use crate::nn::Module;
use crate::plots;
use crate::rng::{derive_seed, tag};
use crate::trainer::{
    epoch_checkpoint_name, extractor_checkpoint_name, pretrain_domain_extractor, save_extractor, train, LogRecord,
    PretrainReport, RunSpec, TrainOptions, Variant, FINAL_CKPT,
};

pub const RESULTS_SCHEMA_VERSION: u32 = 1;

/// Loaded sources and targets.
#[derive(Debug, Clone)]
pub struct Data {
    pub sources: SourceCollection,
    pub targets: Vec<DomainDataset>,
}

impl Data {
    pub fn summary(&self) -> Vec<DomainSummary> {
        crate::data::SyntheticSuite {
            sources: self.sources.clone(),
            targets: self.targets.clone(),
        }
        .summary()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub domain: usize,
    pub checkpoint: PathBuf,
    pub skipped: bool,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub name: String,
    pub probes: usize,
    pub gallery: usize,
    pub gallery_identities: usize,
    pub chance_rank1: f64,
    pub mean_rank1: f64,
    pub per_split_rank1: Vec<f64>,
    pub split_seeds: Vec<u64>,
    pub cmc: Vec<f64>,
    /// Mean average precision; an extension to the rank-1 protocol.
    pub extension_map: ExtensionMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionMap {
    pub per_split: Vec<f64>,
    pub mean: f64,
}

/// Results of one evaluated checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub kind: String,
    pub variant: String,
    pub checkpoint_sha256: String,
    pub config_sha256: String,
    pub seed: u64,
    pub eval_seed: u64,
    pub n_splits: usize,
    pub targets: Vec<TargetResult>,
    pub average_rank1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub label: String,
    pub rank1: Vec<f64>,
    pub average_rank1: f64,
    pub checkpoint_sha256: String,
}

/// Variant comparison written by `reproduce`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub schema_version: u32,
    pub kind: String,
    pub config_sha256: String,
    pub seed: u64,
    pub targets: Vec<String>,
    pub chance_rank1: Vec<f64>,
    pub rows: Vec<ComparisonRow>,
    pub reports: Vec<EvalReport>,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub force: bool,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dir_is_nonempty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn format_domain_table(rows: &[DomainSummary]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:<7} {:>6} {:>6} {:>8}", "Dataset", "Role", "#Cams", "#IDs", "#Images");
    for r in rows {
        let _ = writeln!(s, "{:<14} {:<7} {:>6} {:>6} {:>8}", r.name, r.role, r.cameras, r.identities, r.images);
    }
    let src: Vec<_> = rows.iter().filter(|r| r.role == "source").collect();
    let _ = writeln!(
        s,
        "{:<14} {:<7} {:>6} {:>6} {:>8}",
        "Total",
        "source",
        "",
        src.iter().map(|r| r.identities).sum::<usize>(),
        src.iter().map(|r| r.images).sum::<usize>()
    );
    s
}

/// Targets as columns, `Avg.` last; values in percent.
pub fn format_results_table(rows: &[(String, Vec<f64>, f64)], targets: &[String]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<16}", "Method");
    for t in targets {
        let _ = write!(s, " {:>10}", t);
    }
    let _ = writeln!(s, " {:>8}", "Avg.");
    for (label, vals, avg) in rows {
        let _ = write!(s, "{:<16}", label);
        for v in vals {
            let _ = write!(s, " {:>10.1}", 100.0 * v);
        }
        let _ = writeln!(s, " {:>8.1}", 100.0 * avg);
    }
    s
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, force: bool) -> Self {
        Pipeline { cfg, force }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.cfg.out.join("data")
    }

    pub fn stage1_dir(&self) -> PathBuf {
        self.cfg.out.join("stage1")
    }

    pub fn run_dir(&self, v: Variant) -> PathBuf {
        self.cfg.out.join("runs").join(v.name())
    }

    pub fn stage2_dir(&self, v: Variant) -> PathBuf {
        self.run_dir(v).join("stage2")
    }

    pub fn eval_dir(&self, v: Variant) -> PathBuf {
        self.run_dir(v).join("eval")
    }

    pub fn write_effective_config(&self) -> Result<()> {
        self.cfg.write_effective(&self.cfg.out.join("config.effective.toml"))
    }

    fn synthetic_matches(&self) -> bool {
        read_index(&self.data_dir())
            .map(|i| i.spec == self.cfg.data.synthetic && i.seed == self.cfg.seed)
            .unwrap_or(false)
    }

    fn generate(&self) -> Result<Vec<DomainSummary>> {
        let dir = self.data_dir();
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let suite = generate_synthetic_domains(&self.cfg.data.synthetic, self.cfg.seed)?;
        suite.write(&dir, &self.cfg.data.synthetic, self.cfg.seed)?;
        Ok(suite.summary())
    }

    /// Write the synthetic domains. Refuses to touch a non-empty data
    /// directory unless forced.
    pub fn cmd_synth(&self) -> Result<Vec<DomainSummary>> {
        if self.cfg.data.source != DataSource::Synthetic {
            return Err(Error::Config("synth requires data.source = \"synthetic\"".into()));
        }
        let dir = self.data_dir();
        if dir_is_nonempty(&dir) && !self.force {
            return Err(Error::InvalidArgument(format!(
                "{} is not empty; pass --force to regenerate",
                dir.display()
            )));
        }
        self.write_effective_config()?;
        let rows = self.generate()?;
        println!("{}", format_domain_table(&rows));
        Ok(rows)
    }

    /// Generate synthetic data unless an identical collection already exists.
    pub fn ensure_data(&self) -> Result<Data> {
        if self.cfg.data.source == DataSource::Synthetic && !self.synthetic_matches() {
            if dir_is_nonempty(&self.data_dir()) && !self.force {
                return Err(Error::InvalidArgument(format!(
                    "{} holds data from a different spec or seed; pass --force to regenerate",
                    self.data_dir().display()
                )));
            }
            log::info!("generating synthetic data in {}", self.data_dir().display());
            self.generate()?;
        } else if self.cfg.data.source == DataSource::Synthetic {
            log::info!("synthetic data present; skipped");
        }
        self.load_data()
    }

    pub fn load_data(&self) -> Result<Data> {
        match self.cfg.data.source {
            DataSource::Synthetic => {
                let dir = self.data_dir();
                if !dir.join(crate::data::synthetic::INDEX_FILE).is_file() {
                    return Err(Error::Validation(format!(
                        "no synthetic data in {}; run `dgreid synth` first",
                        dir.display()
                    )));
                }
                if !self.synthetic_matches() {
                    return Err(Error::Validation(format!(
                        "data in {} was generated with a different spec or seed; rerun `dgreid synth --force`",
                        dir.display()
                    )));
                }
                let suite = load_suite(&dir)?;
                Ok(Data {
                    sources: suite.sources,
                    targets: suite.targets,
                })
            }
            DataSource::Manifests => {
                let d = &self.cfg.data;
                let sources = d
                    .source_manifests
                    .iter()
                    .enumerate()
                    .map(|(i, p)| load_domain(p, i))
                    .collect::<Result<Vec<_>>>()?;
                let n = sources.len();
                let targets = d
                    .target_manifests
                    .iter()
                    .enumerate()
                    .map(|(i, p)| load_domain(p, n + i))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Data {
                    sources: SourceCollection::new(sources)?,
                    targets,
                })
            }
        }
    }

    fn init_archive(&self) -> Result<Option<Archive>> {
        let p = &self.cfg.model.init_weights;
        if p.is_empty() {
            Ok(None)
        } else {
            Archive::load(Path::new(p)).map(Some)
        }
    }

    fn apply_init(archive: Option<&Archive>, f: &mut FeatureExtractor) -> Result<()> {
        if let Some(a) = archive {
            a.import("F", f)
                .map_err(|m| Error::Config(format!("model.init_weights: {m}")))?;
        }
        Ok(())
    }

    fn stage1_valid(&self, path: &Path, domain: usize) -> std::result::Result<PretrainOutcome, String> {
        let (_, archive) = load_extractor(path).map_err(|e| e.to_string())?;
        let m = &archive.meta;
        if m.backbone != self.cfg.domain_backbone()
            || m.seed != self.cfg.seed
            || m.epoch != self.cfg.train.pretrain_epochs
            || m.domain != Some(domain)
        {
            return Err("checkpoint was produced by a different configuration".into());
        }
        let losses = m
            .extra
            .get("epoch_losses")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_default();
        Ok(PretrainOutcome {
            domain,
            checkpoint: path.to_path_buf(),
            skipped: true,
            epoch_losses: losses,
        })
    }

    /// Stage 1 for every source domain; valid existing checkpoints are kept
    /// unless forced, corrupted or stale ones are retrained.
    pub fn cmd_pretrain(&self) -> Result<Vec<PretrainOutcome>> {
        self.write_effective_config()?;
        let data = self.load_data()?;
        self.pretrain_with(&data)
    }

    fn pretrain_with(&self, data: &Data) -> Result<Vec<PretrainOutcome>> {
        let dir = self.stage1_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let init = self.init_archive()?;
        let pre = self.cfg.preprocess();
        let mut out = Vec::new();
        for d in data.sources.domains() {
            let path = dir.join(extractor_checkpoint_name(d.domain_id));
            if !self.force && path.exists() {
                match self.stage1_valid(&path, d.domain_id) {
                    Ok(o) => {
                        log::info!("stage-1 checkpoint {} valid; skipped", path.display());
                        out.push(o);
                        continue;
                    }
                    Err(m) => log::warn!("stage-1 checkpoint {} unusable ({m}); retraining", path.display()),
                }
            }
            let (f, report) = if init.is_some() {
                let mut f = FeatureExtractor::new(self.cfg.domain_backbone(), &mut crate::rng::rng_for(0, &[]))?;
                Self::apply_init(init.as_ref(), &mut f)?;
                crate::trainer::pretrain_from(f, d, &self.cfg.train, &pre, self.cfg.seed)?
            } else {
                pretrain_domain_extractor(d, &self.cfg.domain_backbone(), &self.cfg.train, &pre, self.cfg.seed)?
            };
            save_extractor(&f, d.domain_id, self.cfg.train.pretrain_epochs, self.cfg.seed, &report, &path)?;
            out.push(PretrainOutcome {
                domain: d.domain_id,
                checkpoint: path,
                skipped: false,
                epoch_losses: report.epoch_losses,
            });
        }
        write_json(&dir.join("pretrain_report.json"), &out)?;
        Ok(out)
    }

    pub fn load_bank(&self, data: &Data) -> Result<Vec<FrozenExtractor>> {
        data.sources
            .domains()
            .iter()
            .map(|d| {
                let path = self.stage1_dir().join(extractor_checkpoint_name(d.domain_id));
                if !path.is_file() {
                    return Err(Error::checkpoint(
                        &path,
                        "missing stage-1 checkpoint; run `dgreid pretrain` first",
                    ));
                }
                let (f, archive) = load_extractor(&path)?;
                if archive.meta.domain != Some(d.domain_id) {
                    return Err(Error::checkpoint(&path, "checkpoint belongs to another domain"));
                }
                Ok(freeze(f))
            })
            .collect()
    }

    fn final_valid(&self, v: Variant) -> bool {
        let p = self.stage2_dir(v).join(FINAL_CKPT);
        Archive::load(&p)
            .ok()
            .filter(|a| a.meta.epoch == self.cfg.train.epochs && a.meta.seed == self.cfg.seed)
            .and_then(|a| GlobalModel::from_archive(&a, Some(&self.cfg.model_config()), &p).ok())
            .is_some()
    }

    pub fn cmd_train(&self, variant: Variant) -> Result<PathBuf> {
        self.write_effective_config()?;
        let data = self.load_data()?;
        self.train_with(&data, variant)
    }

    fn train_with(&self, data: &Data, variant: Variant) -> Result<PathBuf> {
        let dir = self.stage2_dir(variant);
        let final_path = dir.join(FINAL_CKPT);
        if !self.force && self.final_valid(variant) {
            log::info!("{} exists; skipped", final_path.display());
            return Ok(final_path);
        }
        let bank = if variant == Variant::Baseline {
            Vec::new()
        } else {
            self.load_bank(data)?
        };
        let bank_before: Vec<Vec<f64>> = bank.iter().map(|f| f.extractor().flat_params()).collect();
        let model_cfg = self.cfg.model_config();
        let pre = self.cfg.preprocess();
        let init = self.init_archive()?;
        let spec = RunSpec {
            collection: &data.sources,
            model: &model_cfg,
            train: &self.cfg.train,
            preprocess: &pre,
            variant,
            seed: self.cfg.seed,
            init_weights: init.as_ref(),
        };
        let outcome = train(
            &spec,
            bank,
            &dir,
            &TrainOptions {
                stop_after_epoch: None,
                fresh: self.force,
            },
        )?;
        // the bank is moved into training; reload from disk to confirm it was not written
        if variant != Variant::Baseline {
            let after = self.load_bank(data)?;
            if after.iter().zip(&bank_before).any(|(f, b)| &f.extractor().flat_params() != b) {
                return Err(Error::Numeric("stage-1 checkpoint changed during stage 2".into()));
            }
        }
        self.cfg.write_effective(&self.run_dir(variant).join("config.toml"))?;
        plots::loss_curve(
            &outcome.log,
            &format!("training losses ({})", variant.name()),
            &dir.join("loss_curve.svg"),
        )?;
        outcome
            .final_checkpoint
            .ok_or_else(|| Error::Numeric("training stopped before the last epoch".into()))
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.cfg.seed, &[tag("eval")])
    }

    pub fn cmd_eval(&self, variant: Variant, checkpoint: Option<&Path>) -> Result<EvalReport> {
        self.write_effective_config()?;
        let data = self.load_data()?;
        self.eval_with(&data, variant, checkpoint)
    }

    fn eval_with(&self, data: &Data, variant: Variant, checkpoint: Option<&Path>) -> Result<EvalReport> {
        let ckpt = checkpoint.map_or_else(|| self.stage2_dir(variant).join(FINAL_CKPT), Path::to_path_buf);
        if !ckpt.is_file() {
            return Err(Error::checkpoint(&ckpt, "checkpoint not found; run `dgreid train` first"));
        }
        let archive = Archive::load(&ckpt)?;
        let model = GlobalModel::from_archive(&archive, Some(&self.cfg.model_config()), &ckpt)?;
        let pre = self.cfg.preprocess();
        let opts = EvalOptions {
            n_splits: self.cfg.eval.n_splits,
            cross_camera: self.cfg.eval.cross_camera,
        };
        let wanted = &self.cfg.eval.targets;
        let targets: Vec<&DomainDataset> = data
            .targets
            .iter()
            .filter(|t| wanted.is_empty() || wanted.contains(&t.name))
            .collect();
        if targets.is_empty() {
            return Err(Error::Config("no evaluation targets selected".into()));
        }
        let eval_dir = self.eval_dir(variant);
        fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
        let mut results = Vec::new();
        for t in targets {
            let protocol: SplitProtocol = self.cfg.protocol_for(t)?;
            let r: CMCResult = evaluate_target(&model, t, protocol, opts, &pre, self.eval_seed())?;
            plots::cmc_curve(&r.curve, &format!("CMC {} ({})", t.name, variant.name()), &eval_dir.join(format!("cmc_{}.svg", t.name)))?;
            let split = crate::data::make_single_shot_split(t, protocol, r.split_seeds[0])?;
            let gallery_ids = crate::eval::gallery_identities(&split);
            results.push(TargetResult {
                name: t.name.clone(),
                probes: protocol.probes,
                gallery: protocol.gallery,
                gallery_identities: gallery_ids,
                chance_rank1: 1.0 / gallery_ids as f64,
                mean_rank1: r.mean_rank1,
                per_split_rank1: r.per_split_rank1,
                split_seeds: r.split_seeds,
                cmc: r.curve,
                extension_map: ExtensionMap {
                    per_split: r.per_split_map,
                    mean: r.mean_map,
                },
            });
        }
        let report = EvalReport {
            schema_version: RESULTS_SCHEMA_VERSION,
            kind: "evaluation".into(),
            variant: variant.name().into(),
            checkpoint_sha256: file_sha256(&ckpt)?,
            config_sha256: self.cfg.hash(),
            seed: self.cfg.seed,
            eval_seed: self.eval_seed(),
            n_splits: opts.n_splits,
            average_rank1: mean(&results.iter().map(|r| r.mean_rank1).collect::<Vec<_>>()),
            targets: results,
        };
        write_json(&eval_dir.join("results.json"), &report)?;
        let names: Vec<String> = report.targets.iter().map(|t| t.name.clone()).collect();
        let row = (
            variant.label().to_string(),
            report.targets.iter().map(|t| t.mean_rank1).collect(),
            report.average_rank1,
        );
        println!("{}", format_results_table(&[row], &names));
        Ok(report)
    }

    /// synth → pretrain → train (full and both ablations) → eval, then the
    /// variant comparison. Every stage skips finished work, so a killed run
    /// resumes where it stopped.
    pub fn cmd_reproduce(&self) -> Result<Comparison> {
        self.write_effective_config()?;
        let data = self.ensure_data()?;
        println!("{}", format_domain_table(&data.summary()));
        self.pretrain_with(&data)?;
        let variants = [Variant::Full, Variant::NoTri, Variant::NoConsis];
        let mut reports = Vec::new();
        for v in variants {
            self.train_with(&data, v)?;
            reports.push(self.eval_with(&data, v, None)?);
        }
        let targets: Vec<String> = reports[0].targets.iter().map(|t| t.name.clone()).collect();
        let rows: Vec<ComparisonRow> = variants
            .iter()
            .zip(&reports)
            .map(|(v, r)| ComparisonRow {
                variant: v.name().into(),
                label: v.label().into(),
                rank1: r.targets.iter().map(|t| t.mean_rank1).collect(),
                average_rank1: r.average_rank1,
                checkpoint_sha256: r.checkpoint_sha256.clone(),
            })
            .collect();
        let comparison = Comparison {
            schema_version: RESULTS_SCHEMA_VERSION,
            kind: "comparison".into(),
            config_sha256: self.cfg.hash(),
            seed: self.cfg.seed,
            chance_rank1: reports[0].targets.iter().map(|t| t.chance_rank1).collect(),
            targets: targets.clone(),
            rows,
            reports,
        };
        write_json(&self.cfg.out.join("results.json"), &comparison)?;
        let table = format_results_table(
            &comparison
                .rows
                .iter()
                .map(|r| (r.label.clone(), r.rank1.clone(), r.average_rank1))
                .collect::<Vec<_>>(),
            &targets,
        );
        let p = self.cfg.out.join("summary.txt");
        fs::write(&p, &table).map_err(|e| Error::io(&p, e))?;
        println!("{table}");
        Ok(comparison)
    }

    /// Paths of every per-epoch checkpoint a finished run writes.
    pub fn epoch_checkpoints(&self, v: Variant) -> Vec<PathBuf> {
        (1..=self.cfg.train.epochs)
            .map(|e| self.stage2_dir(v).join(epoch_checkpoint_name(e)))
            .collect()
    }
}

/// Load a training log written by `train`.
pub fn load_training_log(path: &Path) -> Result<Vec<LogRecord>> {
    crate::trainer::read_log(path)
}

pub fn read_pretrain_report(path: &Path) -> Result<Vec<PretrainReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let outcomes: Vec<PretrainOutcome> =
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    Ok(outcomes
        .into_iter()
        .map(|o| PretrainReport {
            domain: o.domain,
            epoch_losses: o.epoch_losses,
        })
        .collect())
}
