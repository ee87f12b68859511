use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bottleneck, Conv2d, Layer, MaxPool, Norm, Sequential};
use crate::rng::Rng;

/// Backbone architecture. Parameter names of the residual variant follow the
/// torchvision layout (`conv1`, `bn1`, `layer1.0.conv1`, ...), so converted
/// external weights load without renaming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    /// Average-pool stem, four conv/norm/relu blocks, global average pool.
    Tiny {
        input_height: usize,
        input_width: usize,
        stem_pool: usize,
        channels: [usize; 4],
        strides: [usize; 4],
        instance_norm: bool,
    },
    /// Bottleneck residual network (`[3, 4, 6, 3]` blocks gives ResNet-50).
    Residual {
        input_height: usize,
        input_width: usize,
        blocks: [usize; 4],
        base_width: usize,
        instance_norm: bool,
    },
}

const EXPANSION: usize = 4;

impl BackboneConfig {
    /// Desk-scale default: 256×128 input, 64-dimensional features.
    pub fn tiny_default() -> Self {
        BackboneConfig::tiny_with(256, 128, 4, 64, true)
    }

    /// Tiny backbone whose channel widths are derived from `d_feat`.
    pub fn tiny_with(h: usize, w: usize, stem_pool: usize, d_feat: usize, instance_norm: bool) -> Self {
        BackboneConfig::Tiny {
            input_height: h,
            input_width: w,
            stem_pool,
            channels: [(d_feat / 4).max(1), (d_feat / 2).max(1), d_feat, d_feat],
            strides: [2, 2, 2, 2],
            instance_norm,
        }
    }

    pub fn resnet50(instance_norm: bool) -> Self {
        BackboneConfig::Residual {
            input_height: 256,
            input_width: 128,
            blocks: [3, 4, 6, 3],
            base_width: 64,
            instance_norm,
        }
    }

    pub fn with_instance_norm(&self, flag: bool) -> Self {
        let mut out = self.clone();
        match &mut out {
            BackboneConfig::Tiny { instance_norm, .. } | BackboneConfig::Residual { instance_norm, .. } => {
                *instance_norm = flag
            }
        }
        out
    }

    pub fn kind(&self) -> &'static str {
        match self {
            BackboneConfig::Tiny { .. } => "tiny",
            BackboneConfig::Residual { .. } => "residual",
        }
    }

    pub fn d_feat(&self) -> usize {
        match self {
            BackboneConfig::Tiny { channels, .. } => channels[3],
            BackboneConfig::Residual { base_width, .. } => base_width * 8 * EXPANSION,
        }
    }

    pub fn input_hw(&self) -> (usize, usize) {
        match *self {
            BackboneConfig::Tiny { input_height, input_width, .. }
            | BackboneConfig::Residual { input_height, input_width, .. } => (input_height, input_width),
        }
    }

    pub fn instance_norm(&self) -> bool {
        match *self {
            BackboneConfig::Tiny { instance_norm, .. } | BackboneConfig::Residual { instance_norm, .. } => {
                instance_norm
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_hw();
        if h == 0 || w == 0 {
            return Err(Error::Config("backbone input size must be positive".into()));
        }
        match self {
            BackboneConfig::Tiny { stem_pool, channels, strides, .. } => {
                if *stem_pool == 0 || h % stem_pool != 0 || w % stem_pool != 0 {
                    return Err(Error::Config(format!(
                        "stem pool {stem_pool} must divide input {h}x{w}"
                    )));
                }
                if channels.iter().any(|&c| c == 0) || strides.iter().any(|&s| s == 0) {
                    return Err(Error::Config("tiny backbone channels/strides must be positive".into()));
                }
            }
            BackboneConfig::Residual { base_width, blocks, .. } => {
                if *base_width == 0 || blocks.iter().any(|&b| b == 0) {
                    return Err(Error::Config("residual backbone widths/blocks must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn build(&self, rng: &mut Rng) -> Sequential {
        match self {
            BackboneConfig::Tiny { stem_pool, channels, strides, instance_norm, .. } => {
                let mut net = Sequential::new();
                if *stem_pool > 1 {
                    net.push("stem", Layer::AvgPool(*stem_pool));
                }
                let mut in_c = 3;
                for (i, (&c, &s)) in channels.iter().zip(strides).enumerate() {
                    let norm = if *instance_norm && i < 2 { Norm::instance(c) } else { Norm::batch(c) };
                    net.push(format!("blocks.{i}.conv"), Layer::Conv(Conv2d::new(in_c, c, 3, s, 1, rng)));
                    net.push(format!("blocks.{i}.norm"), Layer::Norm(norm));
                    net.push(format!("blocks.{i}.relu"), Layer::Relu);
                    in_c = c;
                }
                net.push("pool", Layer::GlobalAvgPool);
                net
            }
            BackboneConfig::Residual { blocks, base_width, instance_norm, .. } => {
                build_residual(*blocks, *base_width, *instance_norm, rng)
            }
        }
    }
}

fn norm_for(channels: usize, instance: bool) -> Layer {
    Layer::Norm(if instance { Norm::instance(channels) } else { Norm::batch(channels) })
}

fn build_residual(blocks: [usize; 4], base: usize, instance_norm: bool, rng: &mut Rng) -> Sequential {
    let mut net = Sequential::new()
        .with("conv1", Layer::Conv(Conv2d::new(3, base, 7, 2, 3, rng)))
        .with("bn1", norm_for(base, instance_norm))
        .with("relu", Layer::Relu)
        .with("maxpool", Layer::MaxPool(MaxPool { kernel: 3, stride: 2, pad: 1 }));
    let mut in_c = base;
    for (stage, &count) in blocks.iter().enumerate() {
        let mid = base << stage;
        let out = mid * EXPANSION;
        // instance normalization replaces batch norm in the first two stages
        let inorm = instance_norm && stage < 2;
        for b in 0..count {
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            let main = Sequential::new()
                .with("conv1", Layer::Conv(Conv2d::new(in_c, mid, 1, 1, 0, rng)))
                .with("bn1", norm_for(mid, inorm))
                .with("relu1", Layer::Relu)
                .with("conv2", Layer::Conv(Conv2d::new(mid, mid, 3, stride, 1, rng)))
                .with("bn2", norm_for(mid, inorm))
                .with("relu2", Layer::Relu)
                .with("conv3", Layer::Conv(Conv2d::new(mid, out, 1, 1, 0, rng)))
                .with("bn3", norm_for(out, inorm));
            let downsample = (b == 0 && (stride != 1 || in_c != out)).then(|| {
                Sequential::new()
                    .with("0", Layer::Conv(Conv2d::new(in_c, out, 1, stride, 0, rng)))
                    .with("1", norm_for(out, inorm))
            });
            net.push(
                format!("layer{}.{b}", stage + 1),
                Layer::Bottleneck(Box::new(Bottleneck { main, downsample })),
            );
            in_c = out;
        }
    }
    net.push("avgpool", Layer::GlobalAvgPool);
    net
}
