use super::layers::{Conv, ConvBn, Ctx, ParamInit};
use crate::autodiff::{ConvSpec, NodeId};
use crate::error::{Error, Result};

/// Channels the low-level skip feature is reduced to.
pub const LOW_LEVEL_REDUCED: usize = 48;

/// Fuses upsampled context with reduced low-level features and maps the
/// result to per-pixel class logits at input resolution.
#[derive(Clone, Debug)]
pub struct Decoder {
    reduce: ConvBn,
    block1: ConvBn,
    block2: ConvBn,
    classifier: Conv,
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

impl Decoder {
    pub(crate) fn new(
        init: &mut ParamInit,
        context_channels: usize,
        low_level_channels: usize,
        channels: usize,
        classes: usize,
    ) -> Self {
        Self {
            reduce: ConvBn::new(
                init,
                "decoder.reduce",
                low_level_channels,
                LOW_LEVEL_REDUCED,
                1,
                ConvSpec::pointwise(),
                true,
            ),
            block1: ConvBn::new(
                init,
                "decoder.block1",
                context_channels + LOW_LEVEL_REDUCED,
                channels,
                3,
                ConvSpec::k3(1, 1),
                true,
            ),
            block2: ConvBn::new(
                init,
                "decoder.block2",
                channels,
                channels,
                3,
                ConvSpec::k3(1, 1),
                true,
            ),
            classifier: Conv::new(
                init,
                "decoder.classifier",
                channels,
                classes,
                1,
                ConvSpec::pointwise(),
            ),
        }
    }

    /// `context` must sit at a quarter of `low_level`'s resolution (rounded
    /// up, as produced by two stride-2 stages).
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        context: NodeId,
        low_level: NodeId,
        out_size: (usize, usize),
    ) -> Result<NodeId> {
        let (bc, _, hc, wc) = ctx.graph.value(context).dims4()?;
        let (bl, _, hl, wl) = ctx.graph.value(low_level).dims4()?;
        if bc != bl || hc != ceil_div(hl, 4) || wc != ceil_div(wl, 4) {
            return Err(Error::Shape(format!(
                "context {hc}x{wc} (batch {bc}) is not at stride 4 of low-level {hl}x{wl} (batch {bl})"
            )));
        }
        let up = ctx.graph.resize_bilinear(context, hl, wl)?;
        let skip = self.reduce.forward(ctx, low_level)?;
        let h = ctx.graph.concat(&[up, skip])?;
        let h = self.block1.forward(ctx, h)?;
        let h = self.block2.forward(ctx, h)?;
        let logits = self.classifier.forward(ctx, h)?;
        let out = ctx.graph.resize_bilinear(logits, out_size.0, out_size.1)?;
        ctx.check("decoder.upsample", out)
    }
}
