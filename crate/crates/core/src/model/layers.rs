use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use super::Mode;
use crate::autodiff::{BatchStats, ConvSpec, Graph, NodeId, NormStats};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Collects parameter and buffer declarations while a network is built.
pub(crate) struct ParamInit {
    rng: Option<Rng>,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl ParamInit {
    /// Random He-normal initialization drawn from `rng` in declaration order.
    pub fn random(rng: Rng) -> Self {
        Self {
            rng: Some(rng),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    /// Shapes only; every value is zero.
    pub fn shapes() -> Self {
        Self {
            rng: None,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    fn declare(&mut self, name: String, t: Tensor) {
        let previous = self.params.insert(name.clone(), t);
        assert!(previous.is_none(), "parameter {name} declared twice");
    }

    pub fn conv_weight(&mut self, name: String, cout: usize, cin: usize, k: usize) {
        let shape = [cout, cin, k, k];
        let t = match self.rng.as_mut() {
            Some(rng) => {
                let std = (2.0 / (cout * k * k) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let data = (0..cout * cin * k * k)
                    .map(|_| normal.sample(rng))
                    .collect();
                Tensor::from_vec(&shape, data).expect("consistent shape")
            }
            None => Tensor::zeros(&shape),
        };
        self.declare(name, t);
    }

    pub fn zeros(&mut self, name: String, len: usize) {
        self.declare(name, Tensor::zeros(&[len]));
    }

    pub fn batch_norm(&mut self, prefix: &str, c: usize) {
        self.declare(format!("{prefix}.weight"), Tensor::full(&[c], 1.0));
        self.declare(format!("{prefix}.bias"), Tensor::zeros(&[c]));
        self.buffers
            .insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
        self.buffers
            .insert(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0));
    }
}

/// Graph handles of a model's parameters.
pub type ParamNodes = BTreeMap<String, NodeId>;

/// State threaded through one forward pass.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    pub params: &'a ParamNodes,
    pub buffers: &'a BTreeMap<String, Tensor>,
    pub mode: Mode,
    pub stats: Vec<(String, BatchStats)>,
}

impl Ctx<'_> {
    pub fn param(&self, name: &str) -> Result<NodeId> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    fn buffer(&self, name: &str) -> Result<&[f64]> {
        self.buffers
            .get(name)
            .map(|t| t.data())
            .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name}")))
    }

    /// Fails with the layer name if its output contains NaN or infinity.
    pub fn check(&self, layer: &str, id: NodeId) -> Result<NodeId> {
        if self.graph.value(id).is_finite() {
            Ok(id)
        } else {
            Err(Error::Numeric(format!(
                "non-finite activation after {layer}"
            )))
        }
    }

    pub fn batch_norm(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let gamma = self.param(&format!("{prefix}.weight"))?;
        let beta = self.param(&format!("{prefix}.bias"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self
                    .graph
                    .batch_norm(x, gamma, beta, NormStats::Batch, BN_EPS)?;
                self.stats
                    .push((prefix.to_owned(), stats.expect("batch statistics")));
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.buffer(&format!("{prefix}.running_mean"))?.to_vec();
                let var = self.buffer(&format!("{prefix}.running_var"))?.to_vec();
                let (y, _) = self.graph.batch_norm(
                    x,
                    gamma,
                    beta,
                    NormStats::Fixed {
                        mean: &mean,
                        var: &var,
                    },
                    BN_EPS,
                )?;
                Ok(y)
            }
        }
    }
}

/// Bias-free convolution, batch normalization and optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    name: String,
    spec: ConvSpec,
    relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        init: &mut ParamInit,
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
        relu: bool,
    ) -> Self {
        let name = name.into();
        init.conv_weight(format!("{name}.conv.weight"), cout, cin, k);
        init.batch_norm(&format!("{name}.bn"), cout);
        Self { name, spec, relu }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: NodeId) -> Result<NodeId> {
        let w = ctx.param(&format!("{}.conv.weight", self.name))?;
        let y = ctx.graph.conv2d(x, w, None, self.spec)?;
        let y = ctx.batch_norm(&format!("{}.bn", self.name), y)?;
        let y = if self.relu { ctx.graph.relu(y) } else { y };
        ctx.check(&self.name, y)
    }
}

/// Plain convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    name: String,
    spec: ConvSpec,
}

impl Conv {
    pub(crate) fn new(
        init: &mut ParamInit,
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
    ) -> Self {
        let name = name.into();
        init.conv_weight(format!("{name}.weight"), cout, cin, k);
        init.zeros(format!("{name}.bias"), cout);
        Self { name, spec }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: NodeId) -> Result<NodeId> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        let y = ctx.graph.conv2d(x, w, Some(b), self.spec)?;
        ctx.check(&self.name, y)
    }
}
