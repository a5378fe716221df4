//! AlexNet and the VGG family.

use candle_core::{Result, Tensor};

use super::layers::{BatchNorm2d, Builder, Conv2d, Ctx, Init, Linear};
use super::ops::{self, Geom};
use super::Backbone;

const DROPOUT: f64 = 0.5;

pub(crate) struct AlexNet {
    convs: Vec<(Conv2d, bool)>,
    fc1: Linear,
    fc2: Linear,
}

impl AlexNet {
    /// Returns the backbone and the width of the head's input.
    pub fn new(b: &mut Builder) -> Result<(Self, usize)> {
        let d = Init::Default;
        // (index, cin, cout, kernel, stride, pad, pool after)
        let cfg = [
            (0, 3, 64, 11, 4, 2, true),
            (3, 64, 192, 5, 1, 2, true),
            (6, 192, 384, 3, 1, 1, false),
            (8, 384, 256, 3, 1, 1, false),
            (10, 256, 256, 3, 1, 1, true),
        ];
        let mut convs = Vec::new();
        for (i, cin, cout, k, s, p, pool) in cfg {
            let conv = Conv2d::new(b, &format!("features.{i}"), cin, cout, Geom::square(k, s, p), true, d, d)?;
            convs.push((conv, pool));
        }
        let fc1 = Linear::new(b, "classifier.1", 256 * 6 * 6, 4096, d, d)?;
        let fc2 = Linear::new(b, "classifier.4", 4096, 4096, d, d)?;
        Ok((Self { convs, fc1, fc2 }, 4096))
    }
}

impl Backbone for AlexNet {
    fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, Option<Tensor>)> {
        let mut x = x.clone();
        for (conv, pool) in &self.convs {
            x = conv.forward(&x)?.relu()?;
            if *pool {
                x = ops::max_pool2d(&x, Geom::square(3, 2, 0))?;
            }
        }
        let x = ops::adaptive_avg_pool2d(&x, (6, 6))?.flatten_from(1)?;
        let x = ctx.dropout(&x, DROPOUT)?;
        let x = self.fc1.forward(&x)?.relu()?;
        let x = ctx.dropout(&x, DROPOUT)?;
        let x = self.fc2.forward(&x)?.relu()?;
        Ok((x, None))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum VggDepth {
    D11,
    D13,
    D16,
    D19,
}

impl VggDepth {
    fn layout(self) -> &'static [usize] {
        // 0 marks a max pool
        match self {
            Self::D11 => &[64, 0, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0],
            Self::D13 => &[64, 64, 0, 128, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0],
            Self::D16 => &[64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0],
            Self::D19 => &[
                64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512, 0,
            ],
        }
    }
}

enum VggLayer {
    Conv(Conv2d, Option<BatchNorm2d>),
    Pool,
}

pub(crate) struct Vgg {
    layers: Vec<VggLayer>,
    fc1: Linear,
    fc2: Linear,
}

impl Vgg {
    pub fn new(b: &mut Builder, depth: VggDepth, batch_norm: bool) -> Result<(Self, usize)> {
        let mut layers = Vec::new();
        let mut idx = 0;
        let mut cin = 3;
        for &v in depth.layout() {
            if v == 0 {
                layers.push(VggLayer::Pool);
                idx += 1;
                continue;
            }
            let conv = Conv2d::new(
                b,
                &format!("features.{idx}"),
                cin,
                v,
                Geom::square(3, 1, 1),
                true,
                Init::KaimingFanOut,
                Init::Const(0.0),
            )?;
            let bn = if batch_norm { Some(BatchNorm2d::new(b, &format!("features.{}", idx + 1), v, 1e-5)?) } else { None };
            idx += if batch_norm { 3 } else { 2 };
            layers.push(VggLayer::Conv(conv, bn));
            cin = v;
        }
        let lin = Init::Normal(0.01);
        let zero = Init::Const(0.0);
        let fc1 = Linear::new(b, "classifier.0", 512 * 7 * 7, 4096, lin, zero)?;
        let fc2 = Linear::new(b, "classifier.3", 4096, 4096, lin, zero)?;
        Ok((Self { layers, fc1, fc2 }, 4096))
    }
}

impl Backbone for Vgg {
    fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, Option<Tensor>)> {
        let mut x = x.clone();
        for layer in &self.layers {
            x = match layer {
                VggLayer::Conv(conv, bn) => {
                    let y = conv.forward(&x)?;
                    let y = match bn {
                        Some(bn) => bn.forward(&y, ctx.train)?,
                        None => y,
                    };
                    y.relu()?
                }
                VggLayer::Pool => ops::max_pool2d(&x, Geom::square(2, 2, 0))?,
            };
        }
        let x = ops::adaptive_avg_pool2d(&x, (7, 7))?.flatten_from(1)?;
        let x = self.fc1.forward(&x)?.relu()?;
        let x = ctx.dropout(&x, DROPOUT)?;
        let x = self.fc2.forward(&x)?.relu()?;
        let x = ctx.dropout(&x, DROPOUT)?;
        Ok((x, None))
    }
}
