//! Encoder-decoder segmentation network with an atrous pyramid head.
//!
//! A [`SegModel`] owns its parameters and normalization buffers as named
//! tensors. A forward pass binds the parameters into a [`Graph`], runs the
//! layers and hands back the logits node plus any batch statistics observed,
//! which the caller folds into the running buffers with
//! [`SegModel::apply_stats`]. Evaluation mode never mutates the model.

mod aspp;
mod backbone;
mod decoder;
mod layers;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use aspp::Aspp;
pub use backbone::{ResNet50, ToyEncoder};
pub use decoder::{Decoder, LOW_LEVEL_REDUCED};
pub use layers::{ConvBn, Ctx, ParamNodes, BN_EPS};

use crate::autodiff::{BatchStats, Graph, NodeId};
use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;
use layers::ParamInit;

/// Running-statistics update rate.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    #[default]
    Toy,
    Resnet50,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Toy => "toy",
            Self::Resnet50 => "resnet50",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "resnet50" => Ok(Self::Resnet50),
            other => Err(Error::Usage(format!(
                "unknown backbone {other:?}; expected toy or resnet50"
            ))),
        }
    }
}

/// Everything needed to rebuild a network's structure.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub backbone: BackboneKind,
    pub class_count: usize,
    pub aspp_rates: Vec<usize>,
    pub aspp_channels: usize,
    pub decoder_channels: usize,
}

impl ArchConfig {
    pub const DEFAULT_RATES: [usize; 4] = [6, 12, 18, 24];

    pub fn new(backbone: BackboneKind, class_count: usize) -> Self {
        let width = match backbone {
            BackboneKind::Toy => 32,
            BackboneKind::Resnet50 => 256,
        };
        Self {
            backbone,
            class_count,
            aspp_rates: Self::DEFAULT_RATES.to_vec(),
            aspp_channels: width,
            decoder_channels: width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=256).contains(&self.class_count) {
            return Err(Error::Config(format!(
                "class count {} outside 2..=256",
                self.class_count
            )));
        }
        if self.aspp_rates.contains(&0) {
            return Err(Error::Config("atrous rates must be positive".into()));
        }
        if self.aspp_channels == 0 || self.decoder_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; the pass reports them for running-buffer updates.
    Train,
    /// Running statistics; no side effects.
    Eval,
}

#[derive(Clone, Debug)]
enum Encoder {
    Toy(ToyEncoder),
    Resnet50(ResNet50),
}

#[derive(Clone, Debug)]
struct Network {
    encoder: Encoder,
    aspp: Aspp,
    decoder: Decoder,
}

impl Network {
    fn build(arch: &ArchConfig, init: &mut ParamInit) -> Self {
        let (encoder, low, context) = match arch.backbone {
            BackboneKind::Toy => {
                let e = ToyEncoder::new(init);
                let (l, c) = (e.low_level_channels(), e.context_channels());
                (Encoder::Toy(e), l, c)
            }
            BackboneKind::Resnet50 => {
                let e = ResNet50::new(init);
                let (l, c) = (e.low_level_channels(), e.context_channels());
                (Encoder::Resnet50(e), l, c)
            }
        };
        let aspp = Aspp::new(init, context, arch.aspp_channels, &arch.aspp_rates);
        let decoder = Decoder::new(
            init,
            arch.aspp_channels,
            low,
            arch.decoder_channels,
            arch.class_count,
        );
        Self {
            encoder,
            aspp,
            decoder,
        }
    }
}

/// Output of one forward pass.
pub struct Forward {
    /// `(B, K, H, W)` class logits at input resolution.
    pub logits: NodeId,
    /// Batch statistics per normalization layer, in evaluation order.
    /// Empty in [`Mode::Eval`].
    pub stats: Vec<(String, BatchStats)>,
}

#[derive(Clone, Debug)]
pub struct SegModel {
    arch: ArchConfig,
    net: Network,
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl SegModel {
    /// Builds a randomly initialized network. Equal seeds give identical
    /// weights.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut init = ParamInit::random(substream(seed, "init", &[]));
        let net = Network::build(&arch, &mut init);
        Ok(Self {
            arch,
            net,
            params: init.params,
            buffers: init.buffers,
        })
    }

    /// Rebuilds a network from stored tensors. Every declared tensor must be
    /// present with its declared shape; extra tensors are rejected.
    pub fn from_parts(
        arch: ArchConfig,
        params: BTreeMap<String, Tensor>,
        buffers: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        arch.validate()?;
        let mut init = ParamInit::shapes();
        let net = Network::build(&arch, &mut init);
        check_same_layout("parameter", &init.params, &params)?;
        check_same_layout("buffer", &init.buffers, &buffers)?;
        Ok(Self {
            arch,
            net,
            params,
            buffers,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> ParamNodes {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), g.param(v.clone())))
            .collect()
    }

    /// Registers every parameter as a constant of `g`.
    pub fn bind_frozen(&self, g: &mut Graph) -> ParamNodes {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), g.input(v.clone())))
            .collect()
    }

    /// Runs the network on `x`, an `(B, 3, H, W)` node.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamNodes,
        x: NodeId,
        mode: Mode,
    ) -> Result<Forward> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        let mut ctx = Ctx {
            graph: g,
            params,
            buffers: &self.buffers,
            mode,
            stats: Vec::new(),
        };
        let features = match &self.net.encoder {
            Encoder::Toy(e) => e.forward(&mut ctx, x)?,
            Encoder::Resnet50(e) => e.forward(&mut ctx, x)?,
        };
        let context = self.net.aspp.forward(&mut ctx, features.context)?;
        let logits = self
            .net
            .decoder
            .forward(&mut ctx, context, features.low_level, (h, w))?;
        Ok(Forward {
            logits,
            stats: ctx.stats,
        })
    }

    /// Evaluation-mode logits for an `(B, 3, H, W)` batch.
    pub fn predict_logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind_frozen(&mut g);
        let x = g.input(images.clone());
        let out = self.forward(&mut g, &params, x, Mode::Eval)?;
        Ok(g.value(out.logits).clone())
    }

    /// Evaluation-mode class probabilities for an `(B, 3, H, W)` batch.
    pub fn predict_probs(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind_frozen(&mut g);
        let x = g.input(images.clone());
        let out = self.forward(&mut g, &params, x, Mode::Eval)?;
        let p = g.softmax(out.logits)?;
        Ok(g.value(p).clone())
    }

    /// Folds observed batch statistics into the running buffers.
    pub fn apply_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, s) in stats {
            for (suffix, observed) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = format!("{prefix}.{suffix}");
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name}")))?;
                for (r, &o) in buf.data_mut().iter_mut().zip(observed) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * o;
                }
            }
        }
        Ok(())
    }

    /// Copies every `backbone.*` tensor from `source`, which must share this
    /// model's backbone layout.
    pub fn load_backbone(&mut self, source: &SegModel) -> Result<usize> {
        if source.arch.backbone != self.arch.backbone {
            return Err(Error::Checkpoint(format!(
                "backbone mismatch: {} vs {}",
                source.arch.backbone, self.arch.backbone
            )));
        }
        let mut copied = 0;
        for (dst, src) in [
            (&mut self.params, &source.params),
            (&mut self.buffers, &source.buffers),
        ] {
            for (name, t) in dst.iter_mut().filter(|(n, _)| n.starts_with("backbone.")) {
                let s = src
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("source lacks {name}")))?;
                if s.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
                }
                *t = s.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Stores parameters and buffers under `prefix/param/` and
    /// `prefix/buffer/`.
    pub fn write_into(&self, archive: &mut Archive, prefix: &str) {
        for (name, t) in &self.params {
            archive.insert(format!("{prefix}/param/{name}"), t.clone());
        }
        for (name, t) in &self.buffers {
            archive.insert(format!("{prefix}/buffer/{name}"), t.clone());
        }
    }

    pub fn read_from(archive: &Archive, prefix: &str, arch: ArchConfig) -> Result<Self> {
        let params = archive.section(&format!("{prefix}/param/"));
        let buffers = archive.section(&format!("{prefix}/buffer/"));
        if params.is_empty() {
            return Err(Error::Checkpoint(format!(
                "no {prefix} parameters in archive"
            )));
        }
        Self::from_parts(arch, params, buffers)
    }
}

fn check_same_layout(
    what: &str,
    expected: &BTreeMap<String, Tensor>,
    actual: &BTreeMap<String, Tensor>,
) -> Result<()> {
    for (name, t) in expected {
        match actual.get(name) {
            None => return Err(Error::Checkpoint(format!("missing {what} {name}"))),
            Some(a) if a.shape() != t.shape() => {
                return Err(Error::Checkpoint(format!(
                    "{what} {name} has shape {:?}, expected {:?}",
                    a.shape(),
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = actual.keys().find(|k| !expected.contains_key(*k)) {
        return Err(Error::Checkpoint(format!("unexpected {what} {extra}")));
    }
    Ok(())
}

/// Builds one network with default widths for `kind`.
pub fn build_model(kind: BackboneKind, class_count: usize, seed: u64) -> Result<SegModel> {
    SegModel::new(ArchConfig::new(kind, class_count), seed)
}

/// The two cross-supervising networks.
#[derive(Clone, Debug)]
pub struct ModelPair {
    pub net1: SegModel,
    pub net2: SegModel,
}

/// Warning text when two seeds would make both networks identical.
pub fn pair_warning(seeds: (u64, u64)) -> Option<String> {
    (seeds.0 == seeds.1).then(|| {
        format!(
            "both networks seeded with {}: identical initial weights collapse cross supervision",
            seeds.0
        )
    })
}

pub fn init_pair(arch: &ArchConfig, seeds: (u64, u64)) -> Result<ModelPair> {
    if let Some(w) = pair_warning(seeds) {
        log::warn!("{w}");
    }
    Ok(ModelPair {
        net1: SegModel::new(arch.clone(), seeds.0)?,
        net2: SegModel::new(arch.clone(), seeds.1)?,
    })
}
