//! Feature extractors, the domain-generalized encoder and the identity
//! classifier.
//!
//! Data flows `image → extractor → encoder → classifier`. Domain-specific
//! extractors are trained in the first stage and then wrapped in
//! [`FrozenExtractor`], which only exposes inference-mode forward passes.

mod backbone;
pub mod checkpoint;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use backbone::BackboneConfig;
use checkpoint::{Archive, Stage};

use crate::error::{Error, Result};
use crate::nn::{Layer, Linear, Module, Norm, Param, Sequential, Trace};
use crate::rng::{rng_for, tag, Rng};
use crate::tensor::Tensor;

/// Architecture of the global model (extractor + encoder + classifier).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub d_emb: usize,
    /// Width of the encoder's first affine layer.
    pub encoder_hidden: usize,
}

impl ModelConfig {
    pub fn d_feat(&self) -> usize {
        self.backbone.d_feat()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.d_emb == 0 || self.encoder_hidden == 0 {
            return Err(Error::Config("d_emb and encoder_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Convolutional backbone mapping `[N, 3, H, W]` images to `[N, d_feat]`.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    config: BackboneConfig,
    net: Sequential,
}

impl FeatureExtractor {
    pub fn new(config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let net = config.build(rng);
        Ok(FeatureExtractor { config, net })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn d_feat(&self) -> usize {
        self.config.d_feat()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (h, w) = self.config.input_hw();
        match *x.shape() {
            [_, 3, xh, xw] if xh == h && xw == w => Ok(()),
            _ => Err(Error::Shape(format!(
                "extractor expects [N, 3, {h}, {w}], got {:?}",
                x.shape()
            ))),
        }
    }

    /// Inference-mode forward pass (running batch-norm statistics).
    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.net.forward_eval(x)
    }

    /// Training-mode forward pass; updates running statistics.
    pub fn forward_train(&mut self, x: Tensor) -> Result<(Tensor, Vec<Trace>)> {
        self.check_input(&x)?;
        self.net.forward_train(x, true)
    }

    pub fn backward(&mut self, traces: &[Trace], dfeat: Tensor) {
        self.net.backward(traces, dfeat, false);
    }
}

impl Module for FeatureExtractor {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.net.visit_params(prefix, f)
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.net.visit_params_mut(prefix, f)
    }
    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.net.visit_buffers(prefix, f)
    }
    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.net.visit_buffers_mut(prefix, f)
    }
}

/// Read-only handle to a pretrained domain-specific extractor.
///
/// Its outputs feed the encoder (so the encoder still receives gradients),
/// but there is no path that writes to the wrapped parameters or running
/// statistics.
#[derive(Debug, Clone)]
pub struct FrozenExtractor {
    inner: Arc<FeatureExtractor>,
}

pub fn freeze(extractor: FeatureExtractor) -> FrozenExtractor {
    FrozenExtractor {
        inner: Arc::new(extractor),
    }
}

impl FrozenExtractor {
    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        self.inner.extract(x)
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.inner
    }

    pub fn d_feat(&self) -> usize {
        self.inner.d_feat()
    }
}

/// Two affine layers with batch normalization, rectifier after the first.
#[derive(Debug, Clone)]
pub struct Encoder {
    d_feat: usize,
    d_emb: usize,
    net: Sequential,
}

impl Encoder {
    pub fn new(d_feat: usize, hidden: usize, d_emb: usize, rng: &mut Rng) -> Self {
        let net = Sequential::new()
            .with("fc1", Layer::Linear(Linear::he(d_feat, hidden, rng)))
            .with("bn1", Layer::Norm(Norm::batch(hidden)))
            .with("relu", Layer::Relu)
            .with("fc2", Layer::Linear(Linear::he(hidden, d_emb, rng)))
            .with("bn2", Layer::Norm(Norm::batch(d_emb)));
        Encoder { d_feat, d_emb, net }
    }

    pub fn d_feat(&self) -> usize {
        self.d_feat
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        match *x.shape() {
            [_, d] if d == self.d_feat => Ok(()),
            _ => Err(Error::Shape(format!(
                "encoder expects [N, {}], got {:?}",
                self.d_feat,
                x.shape()
            ))),
        }
    }

    pub fn encode(&self, features: &Tensor) -> Result<Tensor> {
        self.check_input(features)?;
        self.net.forward_eval(features)
    }

    pub fn forward_train(&mut self, features: Tensor, update_running: bool) -> Result<(Tensor, Vec<Trace>)> {
        self.check_input(&features)?;
        self.net.forward_train(features, update_running)
    }

    pub fn backward(&mut self, traces: &[Trace], dv: Tensor, need_dx: bool) -> Option<Tensor> {
        self.net.backward(traces, dv, need_dx)
    }
}

impl Module for Encoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.net.visit_params(prefix, f)
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.net.visit_params_mut(prefix, f)
    }
    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.net.visit_buffers(prefix, f)
    }
    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.net.visit_buffers_mut(prefix, f)
    }
}

/// Single affine layer producing one logit per global identity.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub fc: Linear,
}

impl Classifier {
    pub fn new(d_emb: usize, num_classes: usize, rng: &mut Rng) -> Self {
        Classifier {
            fc: Linear::new(d_emb, num_classes, 1e-3, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.fc.out_dim
    }

    pub fn logits(&self, embeddings: &Tensor) -> Result<Tensor> {
        self.fc.forward(embeddings)
    }

    /// Row-wise softmax probabilities.
    pub fn classify(&self, embeddings: &Tensor) -> Result<Tensor> {
        Ok(softmax(&self.logits(embeddings)?))
    }

    pub fn backward(&mut self, embeddings: &Tensor, dlogits: &Tensor) -> Tensor {
        self.fc
            .backward(embeddings, dlogits, true)
            .expect("input gradient requested")
    }
}

impl Module for Classifier {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc.visit_params(prefix, f)
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc.visit_params_mut(prefix, f)
    }
}

/// Extractor, encoder and classifier trained together in the second stage.
#[derive(Debug, Clone)]
pub struct GlobalModel {
    pub config: ModelConfig,
    pub extractor: FeatureExtractor,
    pub encoder: Encoder,
    pub classifier: Classifier,
}

impl GlobalModel {
    /// Independent seeded initialization of each part.
    pub fn new(config: ModelConfig, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let d_feat = config.d_feat();
        let extractor = FeatureExtractor::new(config.backbone.clone(), &mut rng_for(seed, &[tag("init-global")]))?;
        let encoder = Encoder::new(
            d_feat,
            config.encoder_hidden,
            config.d_emb,
            &mut rng_for(seed, &[tag("init-encoder")]),
        );
        let classifier = Classifier::new(config.d_emb, num_classes, &mut rng_for(seed, &[tag("init-classifier")]));
        Ok(GlobalModel {
            config,
            extractor,
            encoder,
            classifier,
        })
    }

    /// Inference-mode embeddings `E(F(x))`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.encode(&self.extractor.extract(x)?)
    }

    pub fn export(&self, archive: &mut Archive) {
        archive.export("F", &self.extractor);
        archive.export("E", &self.encoder);
        archive.export("C", &self.classifier);
    }

    /// Rebuild from a global-model checkpoint. When `expected` is given the
    /// stored architecture must match it.
    pub fn from_archive(archive: &Archive, expected: Option<&ModelConfig>, path: &Path) -> Result<Self> {
        let meta = &archive.meta;
        let config = meta
            .model_config()
            .ok_or_else(|| Error::checkpoint(path, "not a global-model checkpoint"))?;
        if let Some(exp) = expected {
            if exp != &config {
                return Err(Error::checkpoint(
                    path,
                    format!("model config mismatch: checkpoint has {config:?}, expected {exp:?}"),
                ));
            }
        }
        let classes = meta
            .total_identities
            .ok_or_else(|| Error::checkpoint(path, "missing total_identities"))?;
        let mut model = GlobalModel::new(config, classes, 0).map_err(|e| Error::checkpoint(path, e.to_string()))?;
        if model.extractor.d_feat() != meta.d_feat {
            return Err(Error::checkpoint(path, "d_feat does not match backbone"));
        }
        archive
            .import("F", &mut model.extractor)
            .and_then(|_| archive.import("E", &mut model.encoder))
            .and_then(|_| archive.import("C", &mut model.classifier))
            .map_err(|m| Error::checkpoint(path, m))?;
        Ok(model)
    }

    pub fn zero_grad(&mut self) {
        self.extractor.zero_grad();
        self.encoder.zero_grad();
        self.classifier.zero_grad();
    }
}

/// Load a stage-1 extractor checkpoint.
pub fn load_extractor(path: &Path) -> Result<(FeatureExtractor, Archive)> {
    let archive = Archive::load(path)?;
    let meta = &archive.meta;
    if meta.stage != Stage::Pretrain {
        return Err(Error::checkpoint(path, format!("expected a pretrain checkpoint, found {:?}", meta.stage)));
    }
    let mut f = FeatureExtractor::new(meta.backbone.clone(), &mut rng_for(0, &[]))
        .map_err(|e| Error::checkpoint(path, e.to_string()))?;
    if f.d_feat() != meta.d_feat {
        return Err(Error::checkpoint(path, "d_feat does not match backbone"));
    }
    archive.import("F", &mut f).map_err(|m| Error::checkpoint(path, m))?;
    Ok((f, archive))
}

pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for i in 0..out.batch() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Backpropagate `dL/dp` through a row-wise softmax given its output `p`.
pub fn softmax_backward(probs: &Tensor, dprobs: &Tensor) -> Tensor {
    let mut dz = Tensor::zeros(probs.shape());
    for i in 0..probs.batch() {
        let p = probs.row(i);
        let g = dprobs.row(i);
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (j, d) in dz.row_mut(i).iter_mut().enumerate() {
            *d = p[j] * (g[j] - dot);
        }
    }
    dz
}
