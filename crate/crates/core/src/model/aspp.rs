//! Atrous spatial pyramid pooling.

use super::layers::{ConvBn, Ctx, ParamInit};
use crate::autodiff::{ConvSpec, NodeId};
use crate::error::Result;

/// Parallel branches over one feature map: a 1x1 convolution, one 3x3
/// atrous convolution per rate and an image-pooling branch. Their outputs
/// are concatenated and fused by a 1x1 conv-BN-ReLU. Spatial size is
/// preserved.
#[derive(Clone, Debug)]
pub struct Aspp {
    branches: Vec<ConvBn>,
    pooling: ConvBn,
    project: ConvBn,
    channels: usize,
}

impl Aspp {
    pub(crate) fn new(init: &mut ParamInit, cin: usize, channels: usize, rates: &[usize]) -> Self {
        let mut branches = vec![ConvBn::new(
            init,
            "aspp.branch0",
            cin,
            channels,
            1,
            ConvSpec::pointwise(),
            true,
        )];
        for (i, &rate) in rates.iter().enumerate() {
            branches.push(ConvBn::new(
                init,
                format!("aspp.branch{}", i + 1),
                cin,
                channels,
                3,
                ConvSpec::k3(1, rate),
                true,
            ));
        }
        let pooling = ConvBn::new(
            init,
            "aspp.pooling",
            cin,
            channels,
            1,
            ConvSpec::pointwise(),
            true,
        );
        let project = ConvBn::new(
            init,
            "aspp.project",
            channels * Self::branch_count(rates.len()),
            channels,
            1,
            ConvSpec::pointwise(),
            true,
        );
        Self {
            branches,
            pooling,
            project,
            channels,
        }
    }

    /// Number of concatenated branches for `rates` atrous rates.
    pub const fn branch_count(rates: usize) -> usize {
        rates + 2
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Concatenated branch outputs before fusion.
    pub fn branches(&self, ctx: &mut Ctx<'_>, x: NodeId) -> Result<NodeId> {
        let (_, _, h, w) = ctx.graph.value(x).dims4()?;
        let mut outs = Vec::with_capacity(self.branches.len() + 1);
        for b in &self.branches {
            outs.push(b.forward(ctx, x)?);
        }
        let pooled = ctx.graph.global_avg_pool(x)?;
        let pooled = self.pooling.forward(ctx, pooled)?;
        outs.push(ctx.graph.resize_bilinear(pooled, h, w)?);
        ctx.graph.concat(&outs)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: NodeId) -> Result<NodeId> {
        let cat = self.branches(ctx, x)?;
        self.project.forward(ctx, cat)
    }
}
