use candle_core::{Result, Tensor};

use super::layers::{BatchNorm2d, Builder, Conv2d, Ctx, Init};
use super::ops::{self, Geom};
use super::Backbone;

const BN_EPS: f64 = 1e-3;
const INIT_STD: f64 = 0.1;
const DROPOUT: f64 = 0.5;

/// Width of the auxiliary classifier's feature vector.
pub(crate) const AUX_FEATURES: usize = 768;

fn geom(k: (usize, usize), s: usize, p: (usize, usize)) -> Geom {
    Geom { kh: k.0, kw: k.1, sh: s, sw: s, ph: p.0, pw: p.1 }
}

fn k1() -> Geom {
    Geom::square(1, 1, 0)
}

struct BasicConv {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl BasicConv {
    fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, g: Geom) -> Result<Self> {
        Self::with_std(b, name, cin, cout, g, INIT_STD)
    }

    fn with_std(b: &mut Builder, name: &str, cin: usize, cout: usize, g: Geom, std: f64) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(b, &format!("{name}.conv"), cin, cout, g, false, Init::TruncNormal(std), Init::Const(0.0))?,
            bn: BatchNorm2d::new(b, &format!("{name}.bn"), cout, BN_EPS)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, train)?.relu()
    }
}

/// Runs a chain of convs.
fn chain(convs: &[BasicConv], x: &Tensor, train: bool) -> Result<Tensor> {
    let mut y = x.clone();
    for c in convs {
        y = c.forward(&y, train)?;
    }
    Ok(y)
}

fn pool_avg3(x: &Tensor) -> Result<Tensor> {
    ops::avg_pool2d(x, Geom::square(3, 1, 1))
}

fn pool_max3s2(x: &Tensor) -> Result<Tensor> {
    ops::max_pool2d(x, Geom::square(3, 2, 0))
}

/// Builds a named branch of convs under `prefix`.
fn branch(b: &mut Builder, prefix: &str, specs: &[(&str, usize, usize, Geom)]) -> Result<Vec<BasicConv>> {
    specs.iter().map(|(n, cin, cout, g)| BasicConv::new(b, &format!("{prefix}.{n}"), *cin, *cout, *g)).collect()
}

enum Mixed {
    A { b1: Vec<BasicConv>, b5: Vec<BasicConv>, b3: Vec<BasicConv>, pool: BasicConv },
    B { b3: Vec<BasicConv>, b3dbl: Vec<BasicConv> },
    C { b1: Vec<BasicConv>, b7: Vec<BasicConv>, b7dbl: Vec<BasicConv>, pool: BasicConv },
    D { b3: Vec<BasicConv>, b7: Vec<BasicConv> },
    E { b1: BasicConv, b3_1: BasicConv, b3_2: [BasicConv; 2], dbl: Vec<BasicConv>, dbl_3: [BasicConv; 2], pool: BasicConv },
}

impl Mixed {
    fn a(b: &mut Builder, p: &str, cin: usize, pool_features: usize) -> Result<Self> {
        Ok(Self::A {
            b1: branch(b, p, &[("branch1x1", cin, 64, k1())])?,
            b5: branch(b, p, &[("branch5x5_1", cin, 48, k1()), ("branch5x5_2", 48, 64, Geom::square(5, 1, 2))])?,
            b3: branch(
                b,
                p,
                &[
                    ("branch3x3dbl_1", cin, 64, k1()),
                    ("branch3x3dbl_2", 64, 96, Geom::square(3, 1, 1)),
                    ("branch3x3dbl_3", 96, 96, Geom::square(3, 1, 1)),
                ],
            )?,
            pool: BasicConv::new(b, &format!("{p}.branch_pool"), cin, pool_features, k1())?,
        })
    }

    fn b(b: &mut Builder, p: &str, cin: usize) -> Result<Self> {
        Ok(Self::B {
            b3: branch(b, p, &[("branch3x3", cin, 384, Geom::square(3, 2, 0))])?,
            b3dbl: branch(
                b,
                p,
                &[
                    ("branch3x3dbl_1", cin, 64, k1()),
                    ("branch3x3dbl_2", 64, 96, Geom::square(3, 1, 1)),
                    ("branch3x3dbl_3", 96, 96, Geom::square(3, 2, 0)),
                ],
            )?,
        })
    }

    fn c(b: &mut Builder, p: &str, cin: usize, c7: usize) -> Result<Self> {
        let row = geom((1, 7), 1, (0, 3));
        let col = geom((7, 1), 1, (3, 0));
        Ok(Self::C {
            b1: branch(b, p, &[("branch1x1", cin, 192, k1())])?,
            b7: branch(
                b,
                p,
                &[("branch7x7_1", cin, c7, k1()), ("branch7x7_2", c7, c7, row), ("branch7x7_3", c7, 192, col)],
            )?,
            b7dbl: branch(
                b,
                p,
                &[
                    ("branch7x7dbl_1", cin, c7, k1()),
                    ("branch7x7dbl_2", c7, c7, col),
                    ("branch7x7dbl_3", c7, c7, row),
                    ("branch7x7dbl_4", c7, c7, col),
                    ("branch7x7dbl_5", c7, 192, row),
                ],
            )?,
            pool: BasicConv::new(b, &format!("{p}.branch_pool"), cin, 192, k1())?,
        })
    }

    fn d(b: &mut Builder, p: &str, cin: usize) -> Result<Self> {
        Ok(Self::D {
            b3: branch(b, p, &[("branch3x3_1", cin, 192, k1()), ("branch3x3_2", 192, 320, Geom::square(3, 2, 0))])?,
            b7: branch(
                b,
                p,
                &[
                    ("branch7x7x3_1", cin, 192, k1()),
                    ("branch7x7x3_2", 192, 192, geom((1, 7), 1, (0, 3))),
                    ("branch7x7x3_3", 192, 192, geom((7, 1), 1, (3, 0))),
                    ("branch7x7x3_4", 192, 192, Geom::square(3, 2, 0)),
                ],
            )?,
        })
    }

    fn e(b: &mut Builder, p: &str, cin: usize) -> Result<Self> {
        let row = geom((1, 3), 1, (0, 1));
        let col = geom((3, 1), 1, (1, 0));
        let n = |s: &str| format!("{p}.{s}");
        Ok(Self::E {
            b1: BasicConv::new(b, &n("branch1x1"), cin, 320, k1())?,
            b3_1: BasicConv::new(b, &n("branch3x3_1"), cin, 384, k1())?,
            b3_2: [
                BasicConv::new(b, &n("branch3x3_2a"), 384, 384, row)?,
                BasicConv::new(b, &n("branch3x3_2b"), 384, 384, col)?,
            ],
            dbl: branch(
                b,
                p,
                &[("branch3x3dbl_1", cin, 448, k1()), ("branch3x3dbl_2", 448, 384, Geom::square(3, 1, 1))],
            )?,
            dbl_3: [
                BasicConv::new(b, &n("branch3x3dbl_3a"), 384, 384, row)?,
                BasicConv::new(b, &n("branch3x3dbl_3b"), 384, 384, col)?,
            ],
            pool: BasicConv::new(b, &n("branch_pool"), cin, 192, k1())?,
        })
    }

    fn forward(&self, x: &Tensor, t: bool) -> Result<Tensor> {
        let parts = match self {
            Self::A { b1, b5, b3, pool } => {
                vec![chain(b1, x, t)?, chain(b5, x, t)?, chain(b3, x, t)?, pool.forward(&pool_avg3(x)?, t)?]
            }
            Self::B { b3, b3dbl } => vec![chain(b3, x, t)?, chain(b3dbl, x, t)?, pool_max3s2(x)?],
            Self::C { b1, b7, b7dbl, pool } => {
                vec![chain(b1, x, t)?, chain(b7, x, t)?, chain(b7dbl, x, t)?, pool.forward(&pool_avg3(x)?, t)?]
            }
            Self::D { b3, b7 } => vec![chain(b3, x, t)?, chain(b7, x, t)?, pool_max3s2(x)?],
            Self::E { b1, b3_1, b3_2, dbl, dbl_3, pool } => {
                let y3 = b3_1.forward(x, t)?;
                let y3 = Tensor::cat(&[b3_2[0].forward(&y3, t)?, b3_2[1].forward(&y3, t)?], 1)?;
                let yd = chain(dbl, x, t)?;
                let yd = Tensor::cat(&[dbl_3[0].forward(&yd, t)?, dbl_3[1].forward(&yd, t)?], 1)?;
                vec![b1.forward(x, t)?, y3, yd, pool.forward(&pool_avg3(x)?, t)?]
            }
        };
        Tensor::cat(&parts, 1)
    }
}

pub(crate) struct InceptionV3 {
    stem: Vec<(BasicConv, bool)>,
    mixed_5_6: Vec<Mixed>,
    aux: [BasicConv; 2],
    mixed_7: Vec<Mixed>,
    transform_input: bool,
}

impl InceptionV3 {
    pub fn new(b: &mut Builder, transform_input: bool) -> Result<(Self, usize)> {
        // (name, cin, cout, geometry, max pool after)
        let stem_cfg = [
            ("Conv2d_1a_3x3", 3, 32, Geom::square(3, 2, 0), false),
            ("Conv2d_2a_3x3", 32, 32, Geom::square(3, 1, 0), false),
            ("Conv2d_2b_3x3", 32, 64, Geom::square(3, 1, 1), true),
            ("Conv2d_3b_1x1", 64, 80, k1(), false),
            ("Conv2d_4a_3x3", 80, 192, Geom::square(3, 1, 0), true),
        ];
        let mut stem = Vec::new();
        for (name, cin, cout, g, pool) in stem_cfg {
            stem.push((BasicConv::new(b, name, cin, cout, g)?, pool));
        }
        let mixed_5_6 = vec![
            Mixed::a(b, "Mixed_5b", 192, 32)?,
            Mixed::a(b, "Mixed_5c", 256, 64)?,
            Mixed::a(b, "Mixed_5d", 288, 64)?,
            Mixed::b(b, "Mixed_6a", 288)?,
            Mixed::c(b, "Mixed_6b", 768, 128)?,
            Mixed::c(b, "Mixed_6c", 768, 160)?,
            Mixed::c(b, "Mixed_6d", 768, 160)?,
            Mixed::c(b, "Mixed_6e", 768, 192)?,
        ];
        let aux = [
            BasicConv::new(b, "AuxLogits.conv0", 768, 128, k1())?,
            BasicConv::with_std(b, "AuxLogits.conv1", 128, AUX_FEATURES, Geom::square(5, 1, 0), 0.01)?,
        ];
        let mixed_7 = vec![Mixed::d(b, "Mixed_7a", 768)?, Mixed::e(b, "Mixed_7b", 1280)?, Mixed::e(b, "Mixed_7c", 2048)?];
        Ok((Self { stem, mixed_5_6, aux, mixed_7, transform_input }, 2048))
    }

    /// Maps ImageNet-normalized input to the [-1, 1] scaling the pretrained
    /// weights expect.
    fn transform(x: &Tensor) -> Result<Tensor> {
        let mean = [0.485, 0.456, 0.406];
        let std = [0.229, 0.224, 0.225];
        let chans = (0..3)
            .map(|c| x.narrow(1, c, 1)?.affine(std[c] / 0.5, (mean[c] - 0.5) / 0.5))
            .collect::<Result<Vec<_>>>()?;
        Tensor::cat(&chans, 1)
    }
}

impl Backbone for InceptionV3 {
    fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, Option<Tensor>)> {
        let t = ctx.train;
        let mut x = if self.transform_input { Self::transform(x)? } else { x.clone() };
        for (conv, pool) in &self.stem {
            x = conv.forward(&x, t)?;
            if *pool {
                x = pool_max3s2(&x)?;
            }
        }
        for m in &self.mixed_5_6 {
            x = m.forward(&x, t)?;
        }
        let aux = if ctx.aux {
            let a = ops::avg_pool2d(&x, Geom::square(5, 3, 0))?;
            let a = self.aux[1].forward(&self.aux[0].forward(&a, t)?, t)?;
            Some(a.mean((2, 3))?)
        } else {
            None
        };
        for m in &self.mixed_7 {
            x = m.forward(&x, t)?;
        }
        let x = ctx.dropout(&x.mean((2, 3))?, DROPOUT)?;
        Ok((x, aux))
    }
}
