//! Two-stage training.
//!
//! Stage 1 trains one extractor per source domain with the batch-hard
//! triplet loss. Stage 2 freezes that bank and trains the global extractor,
//! encoder and classifier episodically: each episode draws a domain triple
//! `(i, j, k)` and a P×K batch from `D_i`, pushes it through the frozen
//! `F_j`, `F_k` and the trainable `F`, and takes one SGD step on the
//! weighted total loss.

mod loader;
mod sampler;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use loader::{load_batch, AugmentStream};
pub use sampler::{sample_episode, sample_pk, sample_triple, EpisodeBatch};

use crate::data::{DomainDataset, PreprocessConfig, SourceCollection};
use crate::error::{Error, Result};
use crate::losses::{
    batch_hard_triplet_loss_with_grad, consistency_loss_with_grad, smoothed_cross_entropy_with_grad, total_loss,
    LossWeights,
};
use crate::model::checkpoint::{Archive, CheckpointMeta, Stage};
use crate::model::{softmax_backward, BackboneConfig, FeatureExtractor, FrozenExtractor, GlobalModel, ModelConfig};
use crate::nn::Module;
use crate::optim::{LrSchedule, Sgd, SgdConfig};
use crate::rng::{rng_for, tag};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub p: usize,
    pub k: usize,
    pub lambda_tri: f64,
    pub lambda_consis: f64,
    pub margin: f64,
    pub smoothing: f64,
    pub smoothing_mode: crate::losses::SmoothingMode,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_drop_epoch: usize,
}

impl Default for TrainConfig {
    /// Full-scale schedule.
    fn default() -> Self {
        let w = LossWeights::default();
        TrainConfig {
            epochs: LrSchedule::FULL_EPOCHS,
            lr: 0.01,
            lr_drop_epoch: LrSchedule::FULL_DROP,
            momentum: 0.9,
            weight_decay: 5e-4,
            p: 4,
            k: 4,
            lambda_tri: w.lambda_tri,
            lambda_consis: w.lambda_consis,
            margin: w.margin,
            smoothing: w.smoothing,
            smoothing_mode: w.smoothing_mode,
            pretrain_epochs: LrSchedule::FULL_EPOCHS,
            pretrain_lr: 0.01,
            pretrain_drop_epoch: LrSchedule::FULL_DROP,
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule: 15 episodic and 10 pretraining epochs, each
    /// with its drop at the same fraction of the run as the full schedule.
    pub fn desk() -> Self {
        let s = LrSchedule::proportional(0.01, 15);
        let pre = LrSchedule::proportional(0.01, 10);
        TrainConfig {
            epochs: 15,
            lr_drop_epoch: s.drop_epoch,
            pretrain_epochs: 10,
            pretrain_drop_epoch: pre.drop_epoch,
            ..TrainConfig::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_tri: self.lambda_tri,
            lambda_consis: self.lambda_consis,
            margin: self.margin,
            smoothing: self.smoothing,
            smoothing_mode: self.smoothing_mode,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            drop_epoch: self.lr_drop_epoch,
            factor: 0.1,
        }
    }

    pub fn pretrain_schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.pretrain_lr,
            drop_epoch: self.pretrain_drop_epoch,
            factor: 0.1,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        self.schedule().validate(self.epochs)?;
        self.pretrain_schedule().validate(self.pretrain_epochs)?;
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config("P and K must both be >= 2".into()));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn iterations_per_epoch(&self, images: usize) -> usize {
        images.div_ceil(self.p * self.k)
    }
}

/// Training variant: the full method, its two loss ablations, or the
/// single-extractor classification baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoTri,
    NoConsis,
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoTri, Variant::NoConsis, Variant::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTri => "no-tri",
            Variant::NoConsis => "no-consis",
            Variant::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "Ours (full)",
            Variant::NoTri => "w/o L_tri",
            Variant::NoConsis => "w/o L_consis",
            Variant::Baseline => "Baseline",
        }
    }

    /// Loss weights with the ablated terms zeroed.
    pub fn apply(self, mut w: LossWeights) -> LossWeights {
        match self {
            Variant::Full => {}
            Variant::NoTri => w.lambda_tri = 0.0,
            Variant::NoConsis => w.lambda_consis = 0.0,
            Variant::Baseline => {
                w.lambda_tri = 0.0;
                w.lambda_consis = 0.0;
            }
        }
        w
    }

    pub fn stage(self) -> Stage {
        if self == Variant::Baseline {
            Stage::Baseline
        } else {
            Stage::Episodic
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub cls: f64,
    pub tri: f64,
    pub consis: f64,
    pub total: f64,
}

impl StepLosses {
    fn all_finite(&self) -> bool {
        [self.cls, self.tri, self.consis, self.total].iter().all(|v| v.is_finite())
    }
}

/// `L_cls` through `F → E → C`; accumulates gradients into all three and
/// returns the loss with the embeddings' cross-entropy gradient already
/// propagated.
fn classification_backward(model: &mut GlobalModel, x: &Tensor, global: &[usize], w: &LossWeights) -> Result<f64> {
    let (feat, f_trace) = model.extractor.forward_train(x.clone())?;
    let (v, e_trace) = model.encoder.forward_train(feat, true)?;
    let probs = model.classifier.classify(&v)?;
    let (cls, dp) = smoothed_cross_entropy_with_grad(&probs, global, w.smoothing, w.smoothing_mode)?;
    let dz = softmax_backward(&probs, &dp);
    let dv = model.classifier.backward(&v, &dz);
    let dfeat = model.encoder.backward(&e_trace, dv, true).expect("input gradient requested");
    model.extractor.backward(&f_trace, dfeat);
    Ok(cls)
}

/// Zero all gradients, then accumulate `∇L_total` for one episode into the
/// global model. All loss values are reported; terms whose weight is zero
/// contribute no gradient at all.
pub fn episode_gradients(
    model: &mut GlobalModel,
    f_j: &FrozenExtractor,
    f_k: &FrozenExtractor,
    x: &Tensor,
    local: &[usize],
    global: &[usize],
    w: &LossWeights,
) -> Result<StepLosses> {
    model.zero_grad();
    let cls = classification_backward(model, x, global, w)?;
    let (v_j, tr_j) = model.encoder.forward_train(f_j.extract(x)?, false)?;
    let (v_k, tr_k) = model.encoder.forward_train(f_k.extract(x)?, false)?;
    let (tri, g_tri) = batch_hard_triplet_loss_with_grad(&v_j, local, w.margin)?;
    let (consis, g_j, g_k) = consistency_loss_with_grad(&v_j, &v_k)?;
    let mut dv_j = Tensor::zeros(v_j.shape());
    if w.lambda_tri > 0.0 {
        dv_j.add_scaled(&g_tri, w.lambda_tri);
    }
    if w.lambda_consis > 0.0 {
        dv_j.add_scaled(&g_j, w.lambda_consis);
        model.encoder.backward(&tr_k, g_k.scale(w.lambda_consis), false);
    }
    if w.lambda_tri > 0.0 || w.lambda_consis > 0.0 {
        model.encoder.backward(&tr_j, dv_j, false);
    }
    let total = total_loss(cls, tri, consis, w)?;
    Ok(StepLosses { cls, tri, consis, total })
}

/// Zero all gradients, then accumulate the gradient of the classification
/// loss alone.
pub fn classification_gradients(model: &mut GlobalModel, x: &Tensor, global: &[usize], w: &LossWeights) -> Result<StepLosses> {
    model.zero_grad();
    let cls = classification_backward(model, x, global, w)?;
    Ok(StepLosses {
        cls,
        tri: 0.0,
        consis: 0.0,
        total: cls,
    })
}

/// Everything the second stage owns.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: GlobalModel,
    pub optim: Sgd,
    pub weights: LossWeights,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed iterations.
    pub iteration: usize,
    pub bank: Vec<FrozenExtractor>,
}

impl TrainState {
    fn apply_update(&mut self, lr: f64) {
        self.optim.step("F", &mut self.model.extractor, lr);
        self.optim.step("E", &mut self.model.encoder, lr);
        self.optim.step("C", &mut self.model.classifier, lr);
    }
}

fn check_finite(losses: &StepLosses, batch: &EpisodeBatch, iteration: usize) -> Result<()> {
    if losses.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite loss {losses:?} at iteration {iteration}; domains (i={}, j={}, k={}), samples {:?}",
            batch.i, batch.j, batch.k, batch.samples
        )))
    }
}

/// One episodic update of `F`, `E` and `C`; the frozen bank is only read.
pub fn episodic_step(state: &mut TrainState, batch: &EpisodeBatch, images: &Tensor, lr: f64) -> Result<StepLosses> {
    let missing = |d: usize| Error::InvalidArgument(format!("frozen extractor for domain index {d} missing"));
    let f_j = state.bank.get(batch.j).ok_or_else(|| missing(batch.j))?;
    let f_k = state.bank.get(batch.k).ok_or_else(|| missing(batch.k))?;
    let losses = episode_gradients(
        &mut state.model,
        f_j,
        f_k,
        images,
        &batch.local_labels,
        &batch.global_labels,
        &state.weights,
    )?;
    check_finite(&losses, batch, state.iteration)?;
    state.apply_update(lr);
    Ok(losses)
}

/// Classification-only update (the baseline's step).
pub fn classification_step(state: &mut TrainState, batch: &EpisodeBatch, images: &Tensor, lr: f64) -> Result<StepLosses> {
    let losses = classification_gradients(&mut state.model, images, &batch.global_labels, &state.weights)?;
    check_finite(&losses, batch, state.iteration)?;
    state.apply_update(lr);
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_cls: f64,
    pub l_tri: f64,
    pub l_consis: f64,
    pub l_total: f64,
}

impl LogRecord {
    pub fn text_line(&self) -> String {
        format!(
            "iter {:>6} epoch {:>3} lr {:.6} L_cls {:.6} L_tri {:.6} L_consis {:.6} L_total {:.6}",
            self.iteration, self.epoch, self.lr, self.l_cls, self.l_tri, self.l_consis, self.l_total
        )
    }
}

pub const LOG_TEXT: &str = "train_log.txt";
pub const LOG_JSONL: &str = "train_log.jsonl";
pub const FINAL_CKPT: &str = "final.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch}.ckpt")
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Validation(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_logs(dir: &Path, records: &[LogRecord]) -> Result<()> {
    let mut text = String::new();
    let mut jsonl = String::new();
    for r in records {
        text.push_str(&r.text_line());
        text.push('\n');
        jsonl.push_str(&serde_json::to_string(r).expect("record serializes"));
        jsonl.push('\n');
    }
    let p = dir.join(LOG_TEXT);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    let p = dir.join(LOG_JSONL);
    fs::write(&p, jsonl).map_err(|e| Error::io(&p, e))
}

fn append_logs(dir: &Path, records: &[LogRecord]) -> Result<()> {
    for (name, render) in [
        (LOG_TEXT, &(|r: &LogRecord| r.text_line()) as &dyn Fn(&LogRecord) -> String),
        (LOG_JSONL, &|r: &LogRecord| serde_json::to_string(r).expect("record serializes")),
    ] {
        let p = dir.join(name);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| Error::io(&p, e))?;
        for r in records {
            writeln!(f, "{}", render(r)).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

/// Immutable inputs of a stage-2 run.
#[derive(Debug, Clone)]
pub struct RunSpec<'a> {
    pub collection: &'a SourceCollection,
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub preprocess: &'a PreprocessConfig,
    pub variant: Variant,
    pub seed: u64,
    /// Optional starting weights for the global extractor (`F.` entries).
    pub init_weights: Option<&'a Archive>,
}

impl RunSpec<'_> {
    fn meta(&self, epoch: usize, iteration: usize) -> CheckpointMeta {
        let mut extra = std::collections::BTreeMap::new();
        extra.insert("iteration".into(), serde_json::json!(iteration));
        extra.insert("variant".into(), serde_json::json!(self.variant.name()));
        // every random stream is derived from (seed, iteration), so the
        // iteration counter is the complete generator state
        extra.insert("rng_cursor".into(), serde_json::json!({ "seed": self.seed, "iteration": iteration }));
        CheckpointMeta {
            stage: self.variant.stage(),
            backbone: self.model.backbone.clone(),
            d_feat: self.model.d_feat(),
            d_emb: Some(self.model.d_emb),
            encoder_hidden: Some(self.model.encoder_hidden),
            total_identities: Some(self.collection.label_map().total_identities()),
            domain: None,
            epoch,
            seed: self.seed,
            extra,
        }
    }

    fn save_state(&self, state: &TrainState, path: &Path) -> Result<()> {
        let mut archive = Archive::new(self.meta(state.epoch, state.iteration));
        state.model.export(&mut archive);
        state.optim.export(&mut archive);
        archive.save(path)
    }

    fn load_state(&self, path: &Path, bank: Vec<FrozenExtractor>) -> Result<TrainState> {
        let archive = Archive::load(path)?;
        let expected = self.meta(archive.meta.epoch, 0);
        let m = &archive.meta;
        if m.stage != expected.stage
            || m.seed != self.seed
            || m.total_identities != expected.total_identities
            || m.extra.get("variant") != expected.extra.get("variant")
        {
            return Err(Error::checkpoint(path, "checkpoint belongs to a different run"));
        }
        let model = GlobalModel::from_archive(&archive, Some(self.model), path)?;
        let iteration = m
            .extra
            .get("iteration")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::checkpoint(path, "missing iteration cursor"))? as usize;
        Ok(TrainState {
            model,
            optim: Sgd::import(&archive, self.train.sgd()),
            weights: self.variant.apply(self.train.weights()),
            epoch: m.epoch,
            iteration,
            bank,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop (without writing `final.ckpt`) once this many epochs are done.
    pub stop_after_epoch: Option<usize>,
    /// Ignore existing epoch checkpoints and start from scratch.
    pub fresh: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: Option<PathBuf>,
    pub resumed_from: Option<usize>,
    pub log: Vec<LogRecord>,
    pub lr_trace: Vec<f64>,
}

fn latest_epoch_checkpoint(dir: &Path, epochs: usize) -> Option<(usize, PathBuf)> {
    (1..=epochs)
        .rev()
        .map(|e| (e, dir.join(epoch_checkpoint_name(e))))
        .find(|(_, p)| p.is_file())
}

/// Run stage 2, checkpointing every epoch into `dir`. Resumes from the latest
/// readable epoch checkpoint unless `opts.fresh` is set.
pub fn train(spec: &RunSpec, bank: Vec<FrozenExtractor>, dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    spec.train.validate()?;
    let cfg = spec.train;
    let collection = spec.collection;
    if spec.variant != Variant::Baseline {
        if collection.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "episodic training needs at least 3 source domains, got {}",
                collection.len()
            )));
        }
        if bank.len() != collection.len() {
            return Err(Error::InvalidArgument(format!(
                "frozen bank has {} extractors for {} source domains",
                bank.len(),
                collection.len()
            )));
        }
        if let Some(f) = bank.iter().find(|f| f.d_feat() != spec.model.d_feat()) {
            return Err(Error::Shape(format!(
                "frozen extractor d_feat {} differs from global d_feat {}",
                f.d_feat(),
                spec.model.d_feat()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut resumed_from = None;
    let mut state = None;
    if !opts.fresh {
        if let Some((epoch, path)) = latest_epoch_checkpoint(dir, cfg.epochs) {
            match spec.load_state(&path, bank.clone()) {
                Ok(s) => {
                    log::info!("resuming from {}", path.display());
                    resumed_from = Some(epoch);
                    state = Some(s);
                }
                Err(e) => log::warn!("ignoring unreadable checkpoint: {e}"),
            }
        }
    }
    let mut state = match state {
        Some(s) => s,
        None => TrainState {
            model: {
                let mut m = GlobalModel::new(spec.model.clone(), collection.label_map().total_identities(), spec.seed)?;
                if let Some(a) = spec.init_weights {
                    a.import("F", &mut m.extractor)
                        .map_err(|e| Error::Config(format!("model.init_weights: {e}")))?;
                }
                m
            },
            optim: Sgd::new(cfg.sgd()),
            weights: spec.variant.apply(cfg.weights()),
            epoch: 0,
            iteration: 0,
            bank,
        },
    };

    let log_path = dir.join(LOG_JSONL);
    let mut log = if resumed_from.is_some() && log_path.is_file() {
        read_log(&log_path)?
            .into_iter()
            .filter(|r| r.iteration <= state.iteration)
            .collect()
    } else {
        Vec::new()
    };
    write_logs(dir, &log)?;

    let schedule = cfg.schedule();
    let per_epoch = cfg.iterations_per_epoch(collection.total_images());
    let last = opts.stop_after_epoch.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    for epoch in state.epoch + 1..=last {
        let lr = schedule.lr_at(epoch);
        let mut epoch_log = Vec::with_capacity(per_epoch);
        for _ in 0..per_epoch {
            let it = state.iteration as u64;
            let batch = sample_episode(collection, cfg.p, cfg.k, &mut rng_for(spec.seed, &[tag("episode"), it]))?;
            let images = load_batch(
                collection.domain(batch.i),
                &batch.samples,
                spec.preprocess,
                Some(AugmentStream {
                    seed: spec.seed,
                    scope: tag("stage2"),
                    iteration: it,
                }),
            );
            let step = if spec.variant == Variant::Baseline {
                classification_step(&mut state, &batch, &images, lr)
            } else {
                episodic_step(&mut state, &batch, &images, lr)
            };
            let losses = match step {
                Ok(l) => l,
                Err(e) => {
                    let dump = dir.join("nonfinite_batch.json");
                    let body = serde_json::json!({
                        "iteration": it + 1,
                        "domains": [batch.i, batch.j, batch.k],
                        "samples": batch.samples,
                        "labels": batch.global_labels,
                        "error": e.to_string(),
                    });
                    let _ = fs::write(&dump, serde_json::to_string_pretty(&body).expect("json"));
                    return Err(e);
                }
            };
            state.iteration += 1;
            epoch_log.push(LogRecord {
                iteration: state.iteration,
                epoch,
                lr,
                l_cls: losses.cls,
                l_tri: losses.tri,
                l_consis: losses.consis,
                l_total: losses.total,
            });
        }
        state.epoch = epoch;
        append_logs(dir, &epoch_log)?;
        let mean = epoch_log.iter().map(|r| r.l_total).sum::<f64>() / epoch_log.len().max(1) as f64;
        log::info!("[{}] epoch {epoch}/{} lr {lr} mean L_total {mean:.4}", spec.variant.name(), cfg.epochs);
        log.extend(epoch_log);
        spec.save_state(&state, &dir.join(epoch_checkpoint_name(epoch)))?;
    }

    let final_checkpoint = if state.epoch == cfg.epochs {
        let p = dir.join(FINAL_CKPT);
        spec.save_state(&state, &p)?;
        Some(p)
    } else {
        None
    };
    Ok(TrainOutcome {
        final_checkpoint,
        resumed_from,
        log,
        lr_trace: schedule.trace(cfg.epochs),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub domain: usize,
    pub epoch_losses: Vec<f64>,
}

/// Stage 1: train one extractor on one domain with the batch-hard triplet
/// loss on its features.
pub fn pretrain_domain_extractor(
    domain: &DomainDataset,
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
    preprocess: &PreprocessConfig,
    seed: u64,
) -> Result<(FeatureExtractor, PretrainReport)> {
    cfg.validate()?;
    if domain.num_identities() < cfg.p {
        return Err(Error::InvalidArgument(format!(
            "domain {} has {} identities, too few for P={}",
            domain.name,
            domain.num_identities(),
            cfg.p
        )));
    }
    let d = domain.domain_id as u64;
    let f = FeatureExtractor::new(backbone.clone(), &mut rng_for(seed, &[tag("init-domain"), d]))?;
    pretrain_from(f, domain, cfg, preprocess, seed)
}

/// Stage-1 training starting from the given extractor weights.
pub fn pretrain_from(
    mut f: FeatureExtractor,
    domain: &DomainDataset,
    cfg: &TrainConfig,
    preprocess: &PreprocessConfig,
    seed: u64,
) -> Result<(FeatureExtractor, PretrainReport)> {
    cfg.validate()?;
    if domain.num_identities() < cfg.p {
        return Err(Error::InvalidArgument(format!(
            "domain {} has {} identities, too few for P={}",
            domain.name,
            domain.num_identities(),
            cfg.p
        )));
    }
    let d = domain.domain_id as u64;
    let mut opt = Sgd::new(cfg.sgd());
    let schedule = cfg.pretrain_schedule();
    let per_epoch = cfg.iterations_per_epoch(domain.num_images());
    let mut it = 0u64;
    let mut epoch_losses = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 1..=cfg.pretrain_epochs {
        let lr = schedule.lr_at(epoch);
        let mut sum = 0.0;
        for _ in 0..per_epoch {
            let mut rng = rng_for(seed, &[tag("pretrain"), d, it]);
            let (samples, labels) = sample_pk(domain, cfg.p, cfg.k, &mut rng)?;
            let x = load_batch(
                domain,
                &samples,
                preprocess,
                Some(AugmentStream {
                    seed,
                    scope: tag("stage1") ^ d,
                    iteration: it,
                }),
            );
            f.zero_grad();
            let (feat, trace) = f.forward_train(x)?;
            let (loss, g) = batch_hard_triplet_loss_with_grad(&feat, &labels, cfg.margin)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite pretraining loss on domain {} at iteration {it}; samples {samples:?}",
                    domain.name
                )));
            }
            f.backward(&trace, g);
            opt.step("F", &mut f, lr);
            sum += loss;
            it += 1;
        }
        let mean = sum / per_epoch as f64;
        log::info!("[pretrain {}] epoch {epoch}/{} mean L_tri {mean:.4}", domain.name, cfg.pretrain_epochs);
        epoch_losses.push(mean);
    }
    Ok((
        f,
        PretrainReport {
            domain: domain.domain_id,
            epoch_losses,
        },
    ))
}

pub fn extractor_checkpoint_name(domain: usize) -> String {
    format!("F_{domain}.ckpt")
}

pub fn save_extractor(f: &FeatureExtractor, domain: usize, epoch: usize, seed: u64, report: &PretrainReport, path: &Path) -> Result<()> {
    let mut extra = std::collections::BTreeMap::new();
    extra.insert("epoch_losses".into(), serde_json::json!(report.epoch_losses));
    let mut archive = Archive::new(CheckpointMeta {
        stage: Stage::Pretrain,
        backbone: f.config().clone(),
        d_feat: f.d_feat(),
        d_emb: None,
        encoder_hidden: None,
        total_identities: None,
        domain: Some(domain),
        epoch,
        seed,
        extra,
    });
    archive.export("F", f);
    archive.save(path)
}
