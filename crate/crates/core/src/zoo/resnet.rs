use candle_core::{Result, Tensor};

use super::layers::{BatchNorm2d, Builder, Conv2d, Ctx, Init};
use super::ops::{self, Geom};
use super::Backbone;

const BN_EPS: f64 = 1e-5;

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(b: &mut Builder, conv: &str, bn: &str, cin: usize, cout: usize, geom: Geom) -> Result<Self> {
        let zero = Init::Const(0.0);
        Ok(Self {
            conv: Conv2d::new(b, conv, cin, cout, geom, false, Init::KaimingFanOut, zero)?,
            bn: BatchNorm2d::new(b, bn, cout, BN_EPS)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, train)
    }
}

struct Block {
    /// Two 3x3 units for basic blocks, 1x1/3x3/1x1 for bottlenecks.
    units: Vec<ConvBn>,
    downsample: Option<ConvBn>,
}

impl Block {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        let last = self.units.len() - 1;
        for (i, unit) in self.units.iter().enumerate() {
            y = unit.forward(&y, train)?;
            if i < last {
                y = y.relu()?;
            }
        }
        let identity = match &self.downsample {
            Some(ds) => ds.forward(x, train)?,
            None => x.clone(),
        };
        (y + identity)?.relu()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ResNetDepth {
    R18,
    R34,
    R50,
    R101,
    R152,
}

impl ResNetDepth {
    fn blocks(self) -> [usize; 4] {
        match self {
            Self::R18 => [2, 2, 2, 2],
            Self::R34 | Self::R50 => [3, 4, 6, 3],
            Self::R101 => [3, 4, 23, 3],
            Self::R152 => [3, 8, 36, 3],
        }
    }

    fn bottleneck(self) -> bool {
        !matches!(self, Self::R18 | Self::R34)
    }
}

pub(crate) struct ResNet {
    stem: ConvBn,
    blocks: Vec<Block>,
}

impl ResNet {
    pub fn new(b: &mut Builder, depth: ResNetDepth) -> Result<(Self, usize)> {
        let stem = ConvBn::new(b, "conv1", "bn1", 3, 64, Geom::square(7, 2, 3))?;

        let expansion = if depth.bottleneck() { 4 } else { 1 };
        let mut inplanes = 64;
        let mut blocks = Vec::new();
        for (li, &count) in depth.blocks().iter().enumerate() {
            let planes = 64 << li;
            for bi in 0..count {
                let stride = if li > 0 && bi == 0 { 2 } else { 1 };
                let p = format!("layer{}.{bi}", li + 1);
                let n = |s: &str| format!("{p}.{s}");
                let units = if depth.bottleneck() {
                    vec![
                        ConvBn::new(b, &n("conv1"), &n("bn1"), inplanes, planes, Geom::square(1, 1, 0))?,
                        ConvBn::new(b, &n("conv2"), &n("bn2"), planes, planes, Geom::square(3, stride, 1))?,
                        ConvBn::new(b, &n("conv3"), &n("bn3"), planes, planes * expansion, Geom::square(1, 1, 0))?,
                    ]
                } else {
                    vec![
                        ConvBn::new(b, &n("conv1"), &n("bn1"), inplanes, planes, Geom::square(3, stride, 1))?,
                        ConvBn::new(b, &n("conv2"), &n("bn2"), planes, planes, Geom::square(3, 1, 1))?,
                    ]
                };
                let downsample = if stride != 1 || inplanes != planes * expansion {
                    let g = Geom::square(1, stride, 0);
                    Some(ConvBn::new(b, &n("downsample.0"), &n("downsample.1"), inplanes, planes * expansion, g)?)
                } else {
                    None
                };
                blocks.push(Block { units, downsample });
                inplanes = planes * expansion;
            }
        }
        Ok((Self { stem, blocks }, inplanes))
    }
}

impl Backbone for ResNet {
    fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, Option<Tensor>)> {
        let x = self.stem.forward(x, ctx.train)?.relu()?;
        let mut x = ops::max_pool2d(&x, Geom::square(3, 2, 1))?;
        for block in &self.blocks {
            x = block.forward(&x, ctx.train)?;
        }
        Ok((x.mean((2, 3))?, None))
    }
}
