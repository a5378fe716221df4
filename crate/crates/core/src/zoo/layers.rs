use candle_core::{Device, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::ops::{self, Geom};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by gradient descent.
    Weight,
    /// Running statistics; never touched by the optimizer.
    Buffer,
}

/// One named tensor of a model. Names follow the torchvision state-dict keys
/// so pretrained blobs load by name.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub group: ParamGroup,
    pub kind: ParamKind,
    pub trainable: bool,
}

impl Param {
    pub fn shape(&self) -> &[usize] {
        self.var.as_tensor().dims()
    }
}

/// Weight initializers, resolved against a layer's fans.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the torch default for conv and linear.
    Default,
    KaimingFanOut,
    KaimingFanIn,
    Normal(f64),
    /// Normal truncated to [-2, 2] (absolute bounds).
    TruncNormal(f64),
    Const(f32),
}

pub(crate) struct Builder<'a> {
    pub params: &'a mut Vec<Param>,
    pub rng: &'a mut ChaCha8Rng,
    pub group: ParamGroup,
    pub device: &'a Device,
}

impl Builder<'_> {
    fn sample(&mut self, len: usize, init: Init, fan_in: usize, fan_out: usize) -> Vec<f32> {
        let normal = |rng: &mut ChaCha8Rng, std: f64| -> Vec<f32> {
            let d = Normal::new(0.0, std).expect("finite std");
            (0..len).map(|_| d.sample(rng) as f32).collect()
        };
        match init {
            Init::Default => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..len).map(|_| d.sample(&mut *self.rng) as f32).collect()
            }
            Init::KaimingFanOut => normal(self.rng, (2.0 / fan_out as f64).sqrt()),
            Init::KaimingFanIn => normal(self.rng, (2.0 / fan_in as f64).sqrt()),
            Init::Normal(std) => normal(self.rng, std),
            Init::TruncNormal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..len)
                    .map(|_| loop {
                        let v: f64 = d.sample(&mut *self.rng);
                        if (-2.0..=2.0).contains(&v) {
                            break v as f32;
                        }
                    })
                    .collect()
            }
            Init::Const(v) => vec![v; len],
        }
    }

    pub fn tensor(&mut self, name: &str, dims: &[usize], init: Init, fans: (usize, usize), kind: ParamKind) -> Result<Var> {
        let len = dims.iter().product();
        let data = self.sample(len, init, fans.0, fans.1);
        let var = Var::from_tensor(&Tensor::from_vec(data, dims, self.device)?)?;
        self.params.push(Param { name: name.to_string(), var: var.clone(), group: self.group, kind, trainable: true });
        Ok(var)
    }
}

/// Forward-pass state. Dropout masks come from a seeded generator so a
/// training step is reproducible.
pub(crate) struct Ctx {
    pub train: bool,
    pub aux: bool,
    pub rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Self { train: false, aux: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn dropout(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !self.train || p == 0.0 {
            return Ok(x.clone());
        }
        let scale = (1.0 / (1.0 - p)) as f32;
        let mask: Vec<f32> =
            (0..x.elem_count()).map(|_| if self.rng.random_bool(1.0 - p) { scale } else { 0.0 }).collect();
        x.mul(&Tensor::from_vec(mask, x.shape(), x.device())?)
    }
}

pub(crate) struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    geom: Geom,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, geom: Geom, bias: bool, w_init: Init, b_init: Init) -> Result<Self> {
        let fan_in = cin * geom.kh * geom.kw;
        let fan_out = cout * geom.kh * geom.kw;
        let weight = b.tensor(&format!("{name}.weight"), &[cout, cin, geom.kh, geom.kw], w_init, (fan_in, fan_out), ParamKind::Weight)?;
        let bias = if bias {
            Some(b.tensor(&format!("{name}.bias"), &[cout], b_init, (fan_in, fan_out), ParamKind::Weight)?)
        } else {
            None
        };
        Ok(Self { weight, bias, geom })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, self.weight.as_tensor(), self.bias.as_ref().map(|v| v.as_tensor()), self.geom)
    }
}

pub(crate) struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fin: usize, fout: usize, w_init: Init, b_init: Init) -> Result<Self> {
        let fans = (fin, fout);
        let weight = b.tensor(&format!("{name}.weight"), &[fout, fin], w_init, fans, ParamKind::Weight)?;
        let bias = b.tensor(&format!("{name}.bias"), &[fout], b_init, fans, ParamKind::Weight)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())
    }
}

pub(crate) struct BatchNorm2d {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
}

const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new(b: &mut Builder, name: &str, c: usize, eps: f64) -> Result<Self> {
        let fans = (c, c);
        Ok(Self {
            weight: b.tensor(&format!("{name}.weight"), &[c], Init::Const(1.0), fans, ParamKind::Weight)?,
            bias: b.tensor(&format!("{name}.bias"), &[c], Init::Const(0.0), fans, ParamKind::Weight)?,
            running_mean: b.tensor(&format!("{name}.running_mean"), &[c], Init::Const(0.0), fans, ParamKind::Buffer)?,
            running_var: b.tensor(&format!("{name}.running_var"), &[c], Init::Const(1.0), fans, ParamKind::Buffer)?,
            eps,
        })
    }

    /// Batch statistics (and a running-stat update) in training, running
    /// statistics otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let rm = (self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))?
                .add(&(mean.detach().flatten_all()? * BN_MOMENTUM)?)?;
            let rv = (self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))?
                .add(&(var.detach().flatten_all()? * (BN_MOMENTUM * unbiased))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xhat.broadcast_mul(&self.weight.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)
    }
}
