//! Feature encoders. Both expose a stride-4 low-level feature map and a
//! stride-16 context feature map.

use super::layers::{ConvBn, Ctx, ParamInit};
use crate::autodiff::{ConvSpec, NodeId};
use crate::error::Result;

pub struct Features {
    pub low_level: NodeId,
    pub context: NodeId,
}

/// Four stride-2 3x3 conv-BN-ReLU stages of widths 16, 32, 64 and 128.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    stages: Vec<ConvBn>,
}

impl ToyEncoder {
    pub const WIDTHS: [usize; 4] = [16, 32, 64, 128];

    pub(crate) fn new(init: &mut ParamInit) -> Self {
        let mut cin = 3;
        let stages = Self::WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let s = ConvBn::new(
                    init,
                    format!("backbone.stage{}", i + 1),
                    cin,
                    w,
                    3,
                    ConvSpec::k3(2, 1),
                    true,
                );
                cin = w;
                s
            })
            .collect();
        Self { stages }
    }

    pub fn low_level_channels(&self) -> usize {
        Self::WIDTHS[1]
    }

    pub fn context_channels(&self) -> usize {
        Self::WIDTHS[3]
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: NodeId) -> Result<Features> {
        let mut h = x;
        let mut low_level = x;
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.forward(ctx, h)?;
            if i == 1 {
                low_level = h;
            }
        }
        Ok(Features {
            low_level,
            context: h,
        })
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    name: String,
    reduce: ConvBn,
    spatial: ConvBn,
    expand: ConvBn,
    downsample: Option<ConvBn>,
}

impl Bottleneck {
    fn new(
        init: &mut ParamInit,
        name: String,
        cin: usize,
        planes: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        let cout = planes * 4;
        let reduce = ConvBn::new(
            init,
            format!("{name}.conv1"),
            cin,
            planes,
            1,
            ConvSpec::pointwise(),
            true,
        );
        let spatial = ConvBn::new(
            init,
            format!("{name}.conv2"),
            planes,
            planes,
            3,
            ConvSpec::k3(stride, dilation),
            true,
        );
        let expand = ConvBn::new(
            init,
            format!("{name}.conv3"),
            planes,
            cout,
            1,
            ConvSpec::pointwise(),
            false,
        );
        let downsample = (stride != 1 || cin != cout).then(|| {
            ConvBn::new(
                init,
                format!("{name}.downsample"),
                cin,
                cout,
                1,
                ConvSpec::new(stride, 0, 1),
                false,
            )
        });
        Self {
            name,
            reduce,
            spatial,
            expand,
            downsample,
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: NodeId) -> Result<NodeId> {
        let h = self.reduce.forward(ctx, x)?;
        let h = self.spatial.forward(ctx, h)?;
        let h = self.expand.forward(ctx, h)?;
        let shortcut = match &self.downsample {
            Some(d) => d.forward(ctx, x)?,
            None => x,
        };
        let sum = ctx.graph.add(h, shortcut)?;
        let out = ctx.graph.relu(sum);
        ctx.check(&self.name, out)
    }
}

/// 50-layer bottleneck residual encoder, last stage dilated for output
/// stride 16.
#[derive(Clone, Debug)]
pub struct ResNet50 {
    stem: ConvBn,
    layers: Vec<Vec<Bottleneck>>,
}

impl ResNet50 {
    const BLOCKS: [usize; 4] = [3, 4, 6, 3];
    const PLANES: [usize; 4] = [64, 128, 256, 512];

    pub(crate) fn new(init: &mut ParamInit) -> Self {
        let stem = ConvBn::new(
            init,
            "backbone.stem",
            3,
            64,
            7,
            ConvSpec::new(2, 3, 1),
            true,
        );
        let mut cin = 64;
        let layers = (0..4)
            .map(|l| {
                let (stride, dilation) = match l {
                    0 => (1, 1),
                    3 => (1, 2),
                    _ => (2, 1),
                };
                (0..Self::BLOCKS[l])
                    .map(|b| {
                        let block = Bottleneck::new(
                            init,
                            format!("backbone.layer{}.{b}", l + 1),
                            cin,
                            Self::PLANES[l],
                            if b == 0 { stride } else { 1 },
                            dilation,
                        );
                        cin = Self::PLANES[l] * 4;
                        block
                    })
                    .collect()
            })
            .collect();
        Self { stem, layers }
    }

    pub fn low_level_channels(&self) -> usize {
        Self::PLANES[0] * 4
    }

    pub fn context_channels(&self) -> usize {
        Self::PLANES[3] * 4
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: NodeId) -> Result<Features> {
        let h = self.stem.forward(ctx, x)?;
        let mut h = ctx.graph.max_pool(h, 3, ConvSpec::new(2, 1, 1))?;
        let mut low_level = h;
        for (l, layer) in self.layers.iter().enumerate() {
            for block in layer {
                h = block.forward(ctx, h)?;
            }
            if l == 0 {
                low_level = h;
            }
        }
        Ok(Features {
            low_level,
            context: h,
        })
    }
}
