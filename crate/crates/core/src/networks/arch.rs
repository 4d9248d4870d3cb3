//! Architecture descriptions and the builders that turn them into layer stacks.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Activation, BatchNorm, Conv2d, GroupNorm, PoolKind};
use super::network::Layer;
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    /// Repeated conv-norm-act-pool blocks.
    ConvNet,
    AlexNet,
    Vgg11,
    /// ResNet-18 with stride-2 convolutions replaced by stride-1 conv + average pooling.
    ResNet18,
    /// `psi(x) = flatten(x)`; no parameters besides the classifier head.
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Instance,
    Batch,
    Layer,
    Group,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Avg,
    Max,
    None,
}

impl Pooling {
    fn kind(self) -> Option<PoolKind> {
        match self {
            Pooling::Avg => Some(PoolKind::Avg),
            Pooling::Max => Some(PoolKind::Max),
            Pooling::None => None,
        }
    }
}

/// Channel groups used for `NormKind::Group`.
pub const GROUP_NORM_GROUPS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub arch: ArchKind,
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub norm: NormKind,
    pub pooling: Pooling,
    /// `[C, H, W]`
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl EmbedderConfig {
    /// The default three-block, 128-wide instance-norm ConvNet.
    pub fn convnet(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            arch: ArchKind::ConvNet,
            depth: 3,
            width: 128,
            activation: Activation::Relu,
            norm: NormKind::Instance,
            pooling: Pooling::Avg,
            input_shape,
            num_classes,
        }
    }

    /// Four blocks for 64x64 inputs, three otherwise. Toy-sized inputs (8x8
    /// and below) get width 16.
    pub fn default_for_input(input_shape: [usize; 3], num_classes: usize) -> Self {
        let mut cfg = Self::convnet(input_shape, num_classes);
        if input_shape[1] >= 64 {
            cfg.depth = 4;
        }
        if input_shape[1] <= 8 {
            cfg.width = 16;
        }
        cfg
    }

    pub fn flatten(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            arch: ArchKind::Flatten,
            depth: 0,
            width: 0,
            ..Self::convnet(input_shape, num_classes)
        }
    }

    /// Parses labels such as `convnet`, `convnet3`, `convnet4-bn`, `alexnet`,
    /// `vgg11`, `resnet18`, `flatten`. Reduced-width defaults are used for the
    /// non-ConvNet families, all with batch norm.
    pub fn from_label(label: &str, input_shape: [usize; 3], num_classes: usize) -> Result<Self> {
        let lower = label.to_ascii_lowercase();
        let (base, suffix) = match lower.split_once('-') {
            Some((b, s)) => (b, Some(s)),
            None => (lower.as_str(), None),
        };
        let mut cfg = Self::default_for_input(input_shape, num_classes);
        match base {
            "convnet" => {}
            b if b.starts_with("convnet") => {
                cfg.depth = b["convnet".len()..]
                    .parse()
                    .map_err(|_| Error::Config(format!("unknown architecture `{label}`")))?;
            }
            "alexnet" => {
                cfg.arch = ArchKind::AlexNet;
                cfg.width = 64;
                cfg.norm = NormKind::Batch;
            }
            "vgg11" | "vgg" => {
                cfg.arch = ArchKind::Vgg11;
                cfg.width = 32;
                cfg.norm = NormKind::Batch;
            }
            "resnet18" | "resnet" => {
                cfg.arch = ArchKind::ResNet18;
                cfg.width = 16;
                cfg.norm = NormKind::Batch;
            }
            "flatten" | "identity" => return Ok(Self::flatten(input_shape, num_classes)),
            _ => return Err(Error::Config(format!("unknown architecture `{label}`"))),
        }
        if let Some(s) = suffix {
            cfg.norm = match s {
                "bn" => NormKind::Batch,
                "in" => NormKind::Instance,
                "ln" => NormKind::Layer,
                "gn" => NormKind::Group,
                "nn" => NormKind::None,
                _ => return Err(Error::Config(format!("unknown normalization suffix in `{label}`"))),
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn label(&self) -> String {
        let norm = match self.norm {
            NormKind::Instance => "in",
            NormKind::Batch => "bn",
            NormKind::Layer => "ln",
            NormKind::Group => "gn",
            NormKind::None => "nn",
        };
        match self.arch {
            ArchKind::ConvNet => format!("convnet{}-{norm}", self.depth),
            ArchKind::AlexNet => format!("alexnet-{norm}"),
            ArchKind::Vgg11 => format!("vgg11-{norm}"),
            ArchKind::ResNet18 => format!("resnet18-{norm}"),
            ArchKind::Flatten => "flatten".to_string(),
        }
    }

    /// Checks the config and returns the `[C, H, W]` shape of the final feature map.
    pub fn validate(&self) -> Result<[usize; 3]> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!(
                "input shape {:?} and class count {} must be positive",
                self.input_shape, self.num_classes
            )));
        }
        if self.arch != ArchKind::Flatten && self.width == 0 {
            return Err(Error::Config("width must be at least 1".into()));
        }
        if self.norm == NormKind::Group && self.arch != ArchKind::Flatten {
            let widths = self.channel_plan();
            if let Some(bad) = widths.iter().find(|w| *w % GROUP_NORM_GROUPS != 0) {
                return Err(Error::Config(format!(
                    "group norm needs channel counts divisible by {GROUP_NORM_GROUPS}, got {bad}"
                )));
            }
        }
        let halve = |s: usize, what: &str| -> Result<usize> {
            match s / 2 {
                0 => Err(Error::Config(format!(
                    "input {h}x{w} is too small for {what}: spatial size reaches 0"
                ))),
                v => Ok(v),
            }
        };
        let pad = self.first_pad_extra();
        let (mut sh, mut sw) = (h + 2 * pad, w + 2 * pad);
        match self.arch {
            ArchKind::Flatten => Ok(self.input_shape),
            ArchKind::ConvNet => {
                if self.depth == 0 {
                    return Err(Error::Config("depth must be at least 1".into()));
                }
                if self.pooling != Pooling::None {
                    for _ in 0..self.depth {
                        let what = format!("depth {}", self.depth);
                        sh = halve(sh, &what)?;
                        sw = halve(sw, &what)?;
                    }
                }
                Ok([self.width, sh, sw])
            }
            ArchKind::AlexNet => {
                for _ in 0..3 {
                    sh = halve(sh, "alexnet")?;
                    sw = halve(sw, "alexnet")?;
                }
                Ok([self.width * 3 / 2, sh, sw])
            }
            ArchKind::Vgg11 => {
                for _ in 0..5 {
                    sh = halve(sh, "vgg11")?;
                    sw = halve(sw, "vgg11")?;
                }
                Ok([self.width * 8, sh, sw])
            }
            ArchKind::ResNet18 => {
                for _ in 0..3 {
                    sh = halve(sh, "resnet18")?;
                    sw = halve(sw, "resnet18")?;
                }
                Ok([self.width * 8, 1, 1])
            }
        }
    }

    /// Flattened embedding dimension `d'`.
    pub fn feature_dim(&self) -> Result<usize> {
        Ok(self.validate()?.iter().product())
    }

    /// 28x28 inputs get their first convolution padded out to a 32x32 map.
    fn first_pad_extra(&self) -> usize {
        let [_, h, w] = self.input_shape;
        if h == 28 && w == 28 && self.arch != ArchKind::Flatten {
            2
        } else {
            0
        }
    }

    fn channel_plan(&self) -> Vec<usize> {
        let w = self.width;
        match self.arch {
            ArchKind::ConvNet => vec![w; self.depth],
            ArchKind::AlexNet => vec![w, w * 3 / 2, w * 2, w * 3 / 2, w * 3 / 2],
            ArchKind::Vgg11 => vec![w, 2 * w, 4 * w, 8 * w],
            ArchKind::ResNet18 => vec![w, 2 * w, 4 * w, 8 * w],
            ArchKind::Flatten => vec![],
        }
    }
}

impl fmt::Display for EmbedderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.arch {
            ArchKind::ConvNet => write!(
                f,
                "convnet(depth={}, width={}, act={:?}, norm={:?}, pool={:?})",
                self.depth, self.width, self.activation, self.norm, self.pooling
            ),
            _ => write!(f, "{}(width={})", self.label(), self.width),
        }
    }
}

/// Sequential layer-stack builder that hands out gradient slots in order.
pub(crate) struct StackBuilder<'r, T, R: ?Sized> {
    pub rng: &'r mut R,
    pub slot: usize,
    pub layers: Vec<Layer<T>>,
    pub norm: NormKind,
}

impl<T: Real, R: Rng + ?Sized> StackBuilder<'_, T, R> {
    fn take_slots(&mut self, n: usize) -> usize {
        let s = self.slot;
        self.slot += n;
        s
    }

    pub fn conv(&mut self, cin: usize, cout: usize, kernel: usize, padding: usize) {
        let slot = self.take_slots(2);
        self.layers
            .push(Layer::Conv(Conv2d::new(self.rng, cin, cout, kernel, padding, slot)));
    }

    pub fn norm(&mut self, channels: usize) {
        let layer = match self.norm {
            NormKind::None => return,
            NormKind::Instance => Layer::GroupNorm(GroupNorm::new(channels, channels, self.take_slots(2))),
            NormKind::Layer => Layer::GroupNorm(GroupNorm::new(1, channels, self.take_slots(2))),
            NormKind::Group => Layer::GroupNorm(GroupNorm::new(GROUP_NORM_GROUPS, channels, self.take_slots(2))),
            NormKind::Batch => Layer::BatchNorm(BatchNorm::new(channels, self.take_slots(2))),
        };
        self.layers.push(layer);
    }

    pub fn act(&mut self, a: Activation) {
        self.layers.push(Layer::Act(a));
    }

    pub fn pool(&mut self, p: Pooling) {
        if let Some(k) = p.kind() {
            self.layers.push(Layer::Pool(k));
        }
    }

    /// Moves the accumulated layers out, for use as a residual branch.
    fn split_off(&mut self) -> Vec<Layer<T>> {
        std::mem::take(&mut self.layers)
    }
}

/// Builds the feature extractor for `cfg`. Returns the body and the next free slot.
pub(crate) fn build_body<T: Real, R: Rng + ?Sized>(cfg: &EmbedderConfig, rng: &mut R) -> (Vec<Layer<T>>, usize) {
    let mut b = StackBuilder {
        rng,
        slot: 0,
        layers: Vec::new(),
        norm: cfg.norm,
    };
    let cin = cfg.input_shape[0];
    let extra = cfg.first_pad_extra();
    let act = cfg.activation;
    match cfg.arch {
        ArchKind::Flatten => {}
        ArchKind::ConvNet => {
            let mut c = cin;
            for d in 0..cfg.depth {
                b.conv(c, cfg.width, 3, if d == 0 { 1 + extra } else { 1 });
                b.norm(cfg.width);
                b.act(act);
                b.pool(cfg.pooling);
                c = cfg.width;
            }
        }
        ArchKind::AlexNet => {
            let plan = cfg.channel_plan();
            let mut c = cin;
            for (i, &cout) in plan.iter().enumerate() {
                let (k, pad) = if i < 2 { (5, 2) } else { (3, 1) };
                b.conv(c, cout, k, if i == 0 { pad + extra } else { pad });
                b.norm(cout);
                b.act(act);
                if i < 2 || i == plan.len() - 1 {
                    b.pool(Pooling::Max);
                }
                c = cout;
            }
        }
        ArchKind::Vgg11 => {
            let w = cfg.width;
            let plan = [Some(w), None, Some(2 * w), None, Some(4 * w), Some(4 * w), None, Some(8 * w), Some(8 * w), None, Some(8 * w), Some(8 * w), None];
            let mut c = cin;
            let mut first = true;
            for step in plan {
                match step {
                    Some(cout) => {
                        b.conv(c, cout, 3, if first { 1 + extra } else { 1 });
                        b.norm(cout);
                        b.act(act);
                        c = cout;
                        first = false;
                    }
                    None => b.pool(Pooling::Max),
                }
            }
        }
        ArchKind::ResNet18 => {
            let w = cfg.width;
            b.conv(cin, w, 3, 1 + extra);
            b.norm(w);
            b.act(act);
            let mut c = w;
            for (stage, cout) in [w, 2 * w, 4 * w, 8 * w].into_iter().enumerate() {
                for block in 0..2 {
                    let downsample = stage > 0 && block == 0;
                    let outer = b.split_off();
                    b.conv(c, cout, 3, 1);
                    b.norm(cout);
                    b.act(act);
                    if downsample {
                        b.pool(Pooling::Avg);
                    }
                    b.conv(cout, cout, 3, 1);
                    b.norm(cout);
                    let body = b.split_off();
                    if c != cout || downsample {
                        b.conv(c, cout, 1, 0);
                        b.norm(cout);
                        if downsample {
                            b.pool(Pooling::Avg);
                        }
                    }
                    let shortcut = b.split_off();
                    b.layers = outer;
                    b.layers.push(Layer::Residual { body, shortcut });
                    b.act(act);
                    c = cout;
                }
            }
            b.layers.push(Layer::GlobalPool);
        }
    }
    (b.layers, b.slot)
}
