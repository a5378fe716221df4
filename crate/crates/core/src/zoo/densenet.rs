use candle_core::{Result, Tensor};

use super::layers::{BatchNorm2d, Builder, Conv2d, Ctx, Init};
use super::ops::{self, Geom};
use super::Backbone;

const BN_EPS: f64 = 1e-5;
const BN_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum DenseNetDepth {
    D121,
    D161,
    D169,
    D201,
}

impl DenseNetDepth {
    /// (growth rate, block sizes, stem width)
    fn config(self) -> (usize, [usize; 4], usize) {
        match self {
            Self::D121 => (32, [6, 12, 24, 16], 64),
            Self::D161 => (48, [6, 12, 36, 24], 96),
            Self::D169 => (32, [6, 12, 32, 32], 64),
            Self::D201 => (32, [6, 12, 48, 32], 64),
        }
    }
}

fn conv(b: &mut Builder, name: &str, cin: usize, cout: usize, g: Geom) -> Result<Conv2d> {
    Conv2d::new(b, name, cin, cout, g, false, Init::KaimingFanIn, Init::Const(0.0))
}

struct DenseLayer {
    norm1: BatchNorm2d,
    conv1: Conv2d,
    norm2: BatchNorm2d,
    conv2: Conv2d,
}

impl DenseLayer {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv1.forward(&self.norm1.forward(x, train)?.relu()?)?;
        self.conv2.forward(&self.norm2.forward(&y, train)?.relu()?)
    }
}

struct Transition {
    norm: BatchNorm2d,
    conv: Conv2d,
}

pub(crate) struct DenseNet {
    conv0: Conv2d,
    norm0: BatchNorm2d,
    blocks: Vec<(Vec<DenseLayer>, Option<Transition>)>,
    norm5: BatchNorm2d,
}

impl DenseNet {
    pub fn new(b: &mut Builder, depth: DenseNetDepth) -> Result<(Self, usize)> {
        let (growth, sizes, init) = depth.config();
        let conv0 = conv(b, "features.conv0", 3, init, Geom::square(7, 2, 3))?;
        let norm0 = BatchNorm2d::new(b, "features.norm0", init, BN_EPS)?;
        let mut width = init;
        let mut blocks = Vec::new();
        for (bi, &size) in sizes.iter().enumerate() {
            let mut layers = Vec::new();
            for li in 0..size {
                let p = format!("features.denseblock{}.denselayer{}", bi + 1, li + 1);
                let cin = width + li * growth;
                layers.push(DenseLayer {
                    norm1: BatchNorm2d::new(b, &format!("{p}.norm1"), cin, BN_EPS)?,
                    conv1: conv(b, &format!("{p}.conv1"), cin, BN_SIZE * growth, Geom::square(1, 1, 0))?,
                    norm2: BatchNorm2d::new(b, &format!("{p}.norm2"), BN_SIZE * growth, BN_EPS)?,
                    conv2: conv(b, &format!("{p}.conv2"), BN_SIZE * growth, growth, Geom::square(3, 1, 1))?,
                });
            }
            width += size * growth;
            let transition = if bi + 1 < sizes.len() {
                let p = format!("features.transition{}", bi + 1);
                let t = Transition {
                    norm: BatchNorm2d::new(b, &format!("{p}.norm"), width, BN_EPS)?,
                    conv: conv(b, &format!("{p}.conv"), width, width / 2, Geom::square(1, 1, 0))?,
                };
                width /= 2;
                Some(t)
            } else {
                None
            };
            blocks.push((layers, transition));
        }
        let norm5 = BatchNorm2d::new(b, "features.norm5", width, BN_EPS)?;
        Ok((Self { conv0, norm0, blocks, norm5 }, width))
    }
}

impl Backbone for DenseNet {
    fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, Option<Tensor>)> {
        let train = ctx.train;
        let x = self.norm0.forward(&self.conv0.forward(x)?, train)?.relu()?;
        let mut x = ops::max_pool2d(&x, Geom::square(3, 2, 1))?;
        for (layers, transition) in &self.blocks {
            let mut features = vec![x];
            for layer in layers {
                let input = Tensor::cat(&features, 1)?;
                features.push(layer.forward(&input, train)?);
            }
            x = Tensor::cat(&features, 1)?;
            if let Some(t) = transition {
                let y = t.conv.forward(&t.norm.forward(&x, train)?.relu()?)?;
                x = ops::avg_pool2d(&y, Geom::square(2, 2, 0))?;
            }
        }
        let x = self.norm5.forward(&x, train)?.relu()?;
        Ok((x.mean((2, 3))?, None))
    }
}
