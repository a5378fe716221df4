//! The 16 benchmarked backbones with replaceable K-way heads.

mod checkpoint;
mod densenet;
mod inception;
mod layers;
pub mod ops;
mod provider;
mod resnet;
mod vgg;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::NormalizedImage;
pub use checkpoint::CHECKPOINT_MAGIC;
use layers::{Builder, Ctx, Init, Linear};
pub use layers::{Param, ParamGroup, ParamKind};
pub use provider::PROVIDER_ENV;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("pretrained weights unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("pretrained weights incompatible: {0}")]
    IncompatibleWeights(String),
    #[error("num_classes must be at least 2, got {0}")]
    InvalidClassCount(usize),
    #[error("shape mismatch: expected {expected}, got {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Backend(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    AlexNet,
    Vgg11,
    Vgg13,
    Vgg16,
    Vgg19,
    Vgg11Bn,
    ResNet18,
    ResNet34,
    ResNet50,
    ResNet101,
    ResNet152,
    DenseNet121,
    DenseNet169,
    DenseNet201,
    DenseNet161,
    InceptionV3,
}

/// (architecture, display name, provider slug, top-1 %, top-5 %)
const REGISTRY: [(Architecture, &str, &str, f64, f64); 16] = [
    (Architecture::AlexNet, "AlexNet", "alexnet", 43.45, 20.91),
    (Architecture::Vgg11, "VGG-11", "vgg11", 30.98, 11.37),
    (Architecture::Vgg13, "VGG-13", "vgg13", 30.07, 10.75),
    (Architecture::Vgg16, "VGG-16", "vgg16", 28.41, 9.62),
    (Architecture::Vgg19, "VGG-19", "vgg19", 27.62, 9.12),
    (Architecture::Vgg11Bn, "VGG-11-BN", "vgg11_bn", 29.62, 10.19),
    (Architecture::ResNet18, "ResNet-18", "resnet18", 30.24, 10.92),
    (Architecture::ResNet34, "ResNet-34", "resnet34", 26.70, 8.58),
    (Architecture::ResNet50, "ResNet-50", "resnet50", 23.85, 7.13),
    (Architecture::ResNet101, "ResNet-101", "resnet101", 22.63, 6.44),
    (Architecture::ResNet152, "ResNet-152", "resnet152", 21.69, 5.94),
    (Architecture::DenseNet121, "DenseNet-121", "densenet121", 25.35, 7.83),
    (Architecture::DenseNet169, "DenseNet-169", "densenet169", 24.00, 7.00),
    (Architecture::DenseNet201, "DenseNet-201", "densenet201", 22.80, 6.43),
    (Architecture::DenseNet161, "DenseNet-161", "densenet161", 22.35, 6.20),
    (Architecture::InceptionV3, "Inception v3", "inception_v3", 22.55, 6.44),
];

impl Architecture {
    fn entry(self) -> &'static (Architecture, &'static str, &'static str, f64, f64) {
        REGISTRY.iter().find(|e| e.0 == self).expect("every architecture is registered")
    }

    pub fn name(self) -> &'static str {
        self.entry().1
    }

    /// File stem of the pretrained weight blob.
    pub fn slug(self) -> &'static str {
        self.entry().2
    }

    pub fn input_edge(self) -> u32 {
        match self {
            Self::InceptionV3 => 299,
            _ => 224,
        }
    }

    pub fn spec(self) -> ArchitectureSpec {
        let e = self.entry();
        ArchitectureSpec {
            architecture: self,
            name: e.1.to_string(),
            input_edge: self.input_edge(),
            reported_top1_error: e.3,
            reported_top5_error: e.4,
        }
    }
}

fn normalize_name(s: &str) -> String {
    s.chars().filter(|c| c.is_ascii_alphanumeric()).map(|c| c.to_ascii_lowercase()).collect()
}

impl FromStr for Architecture {
    type Err = ModelError;

    /// Accepts display names and slugs, ignoring case and punctuation.
    fn from_str(s: &str) -> Result<Self> {
        let key = normalize_name(s);
        if key == "vgg11withbatchnormalization" {
            return Ok(Self::Vgg11Bn);
        }
        REGISTRY
            .iter()
            .find(|e| normalize_name(e.1) == key || normalize_name(e.2) == key)
            .map(|e| e.0)
            .ok_or_else(|| ModelError::UnknownArchitecture(s.to_string()))
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub architecture: Architecture,
    pub name: String,
    pub input_edge: u32,
    pub reported_top1_error: f64,
    pub reported_top5_error: f64,
}

pub fn list_architectures() -> Vec<ArchitectureSpec> {
    REGISTRY.iter().map(|e| e.0.spec()).collect()
}

pub fn input_edge(name: &str) -> Result<u32> {
    Ok(name.parse::<Architecture>()?.input_edge())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    FineTune,
    FeatureExtract,
}

impl TransferMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FineTune => "fine_tune",
            Self::FeatureExtract => "feature_extract",
        }
    }
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransferMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match normalize_name(s).as_str() {
            "finetune" | "finetuning" => Ok(Self::FineTune),
            "featureextract" | "featureextractor" | "fixedfeatureextractor" => Ok(Self::FeatureExtract),
            _ => Err(format!("unknown transfer mode `{s}` (expected fine_tune or feature_extract)")),
        }
    }
}

/// Backbone forward: head-input features plus, when requested and
/// available, auxiliary-classifier features.
pub(crate) trait Backbone: Send + Sync {
    fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> candle_core::Result<(Tensor, Option<Tensor>)>;
}

/// Raw outputs of a training-mode forward pass.
pub struct TrainOutput {
    pub logits: Tensor,
    pub aux_logits: Option<Tensor>,
}

pub struct ModelHandle {
    spec: ArchitectureSpec,
    num_classes: usize,
    pretrained: bool,
    mode: TransferMode,
    backbone: Box<dyn Backbone>,
    head: Linear,
    aux_head: Option<Linear>,
    params: Vec<Param>,
    device: Device,
}

impl fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelHandle")
            .field("architecture", &self.spec.name)
            .field("num_classes", &self.num_classes)
            .field("pretrained", &self.pretrained)
            .field("mode", &self.mode)
            .field("params", &self.params.len())
            .finish()
    }
}

/// Builds a model, fetching pretrained weights from the provider named by
/// [`PROVIDER_ENV`] when `pretrained` is set.
pub fn build_model(name: &str, num_classes: usize, pretrained: bool, mode: TransferMode, seed: u64) -> Result<ModelHandle> {
    let root = std::env::var(PROVIDER_ENV).ok();
    build_model_from(name, num_classes, pretrained, mode, seed, root.as_deref())
}

/// [`build_model`] with an explicit provider root instead of the environment.
pub fn build_model_from(
    name: &str,
    num_classes: usize,
    pretrained: bool,
    mode: TransferMode,
    seed: u64,
    provider_root: Option<&str>,
) -> Result<ModelHandle> {
    let arch: Architecture = name.parse()?;
    if num_classes < 2 {
        return Err(ModelError::InvalidClassCount(num_classes));
    }
    let weights = if pretrained {
        let root = provider_root
            .ok_or_else(|| ModelError::ProviderUnavailable(format!("{PROVIDER_ENV} is not set")))?;
        Some(provider::fetch(root, arch.slug())?)
    } else {
        None
    };
    let mut handle = ModelHandle::construct(arch, num_classes, pretrained, mode, seed)?;
    if let Some(w) = weights {
        handle.load_backbone(&w)?;
    }
    Ok(handle)
}

impl ModelHandle {
    pub(crate) fn construct(arch: Architecture, num_classes: usize, pretrained: bool, mode: TransferMode, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(ModelError::InvalidClassCount(num_classes));
        }
        let device = Device::Cpu;
        let mut params = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { params: &mut params, rng: &mut rng, group: ParamGroup::Backbone, device: &device };
        let (backbone, features): (Box<dyn Backbone>, usize) = match arch {
            Architecture::AlexNet => boxed(vgg::AlexNet::new(&mut b)?),
            Architecture::Vgg11 => boxed(vgg::Vgg::new(&mut b, vgg::VggDepth::D11, false)?),
            Architecture::Vgg13 => boxed(vgg::Vgg::new(&mut b, vgg::VggDepth::D13, false)?),
            Architecture::Vgg16 => boxed(vgg::Vgg::new(&mut b, vgg::VggDepth::D16, false)?),
            Architecture::Vgg19 => boxed(vgg::Vgg::new(&mut b, vgg::VggDepth::D19, false)?),
            Architecture::Vgg11Bn => boxed(vgg::Vgg::new(&mut b, vgg::VggDepth::D11, true)?),
            Architecture::ResNet18 => boxed(resnet::ResNet::new(&mut b, resnet::ResNetDepth::R18)?),
            Architecture::ResNet34 => boxed(resnet::ResNet::new(&mut b, resnet::ResNetDepth::R34)?),
            Architecture::ResNet50 => boxed(resnet::ResNet::new(&mut b, resnet::ResNetDepth::R50)?),
            Architecture::ResNet101 => boxed(resnet::ResNet::new(&mut b, resnet::ResNetDepth::R101)?),
            Architecture::ResNet152 => boxed(resnet::ResNet::new(&mut b, resnet::ResNetDepth::R152)?),
            Architecture::DenseNet121 => boxed(densenet::DenseNet::new(&mut b, densenet::DenseNetDepth::D121)?),
            Architecture::DenseNet169 => boxed(densenet::DenseNet::new(&mut b, densenet::DenseNetDepth::D169)?),
            Architecture::DenseNet201 => boxed(densenet::DenseNet::new(&mut b, densenet::DenseNetDepth::D201)?),
            Architecture::DenseNet161 => boxed(densenet::DenseNet::new(&mut b, densenet::DenseNetDepth::D161)?),
            Architecture::InceptionV3 => boxed(inception::InceptionV3::new(&mut b, pretrained)?),
        };

        // The head draws from its own stream so it is identical whether or
        // not the backbone is later overwritten by pretrained weights.
        let mut head_rng = ChaCha8Rng::seed_from_u64(seed);
        head_rng.set_stream(1);
        let mut hb = Builder { params: &mut params, rng: &mut head_rng, group: ParamGroup::Head, device: &device };
        let (head_name, aux_name) = match arch {
            Architecture::AlexNet
            | Architecture::Vgg11
            | Architecture::Vgg13
            | Architecture::Vgg16
            | Architecture::Vgg19
            | Architecture::Vgg11Bn => ("classifier.6", None),
            Architecture::ResNet18
            | Architecture::ResNet34
            | Architecture::ResNet50
            | Architecture::ResNet101
            | Architecture::ResNet152 => ("fc", None),
            Architecture::DenseNet121 | Architecture::DenseNet169 | Architecture::DenseNet201 | Architecture::DenseNet161 => {
                ("classifier", None)
            }
            Architecture::InceptionV3 => ("fc", Some("AuxLogits.fc")),
        };
        let head = Linear::new(&mut hb, head_name, features, num_classes, Init::Default, Init::Default)?;
        let aux_head = match aux_name {
            Some(n) => Some(Linear::new(&mut hb, n, inception::AUX_FEATURES, num_classes, Init::Default, Init::Default)?),
            None => None,
        };

        for p in &mut params {
            p.trainable = p.kind == ParamKind::Weight && (p.group == ParamGroup::Head || mode == TransferMode::FineTune);
        }
        Ok(Self { spec: arch.spec(), num_classes, pretrained, mode, backbone, head, aux_head, params, device })
    }

    /// Overwrites backbone parameters and buffers from a name-keyed map.
    /// Head entries in the map are ignored.
    pub(crate) fn load_backbone(&mut self, weights: &HashMap<String, Tensor>) -> Result<()> {
        for p in self.params.iter().filter(|p| p.group == ParamGroup::Backbone) {
            let t = weights
                .get(&p.name)
                .ok_or_else(|| ModelError::IncompatibleWeights(format!("missing tensor `{}`", p.name)))?;
            set_param(p, t)?;
        }
        Ok(())
    }

    pub fn architecture(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn mode(&self) -> TransferMode {
        self.mode
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn trainable_params(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.trainable)
    }

    pub fn has_aux_head(&self) -> bool {
        self.aux_head.is_some()
    }

    /// Little-endian bytes of every parameter and buffer in `group`, in
    /// registration order. Two snapshots compare equal iff the group is
    /// bit-identical.
    pub fn snapshot(&self, group: ParamGroup) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            out.extend(p.name.as_bytes());
            for v in p.var.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Stacks normalized images into an (N, 3, E, E) tensor after checking
    /// their edge against the architecture's input edge.
    pub fn batch_tensor(&self, images: &[&NormalizedImage]) -> Result<Tensor> {
        let e = self.spec.input_edge as usize;
        let mut data = Vec::with_capacity(images.len() * 3 * e * e);
        for img in images {
            if img.edge != e || img.data.len() != 3 * e * e {
                return Err(ModelError::ShapeMismatch {
                    expected: format!("3x{e}x{e}"),
                    found: format!("{} values with edge {}", img.data.len(), img.edge),
                });
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, e, e), &self.device)?)
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        let e = self.spec.input_edge as usize;
        match x.dims() {
            [_, 3, h, w] if *h == e && *w == e => Ok(()),
            dims => Err(ModelError::ShapeMismatch { expected: format!("Nx3x{e}x{e}"), found: format!("{dims:?}") }),
        }
    }

    /// Inference-mode logits for an (N, 3, E, E) batch.
    pub fn predict_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.head_eval(&self.features_eval(x)?)
    }

    /// Inference-mode backbone output (the head's input), detached.
    pub fn features_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let (features, _) = self.backbone.forward(x, &mut Ctx::eval())?;
        Ok(features.detach())
    }

    /// Inference-mode head applied to features from [`Self::features_eval`].
    pub fn head_eval(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(features)?.detach())
    }

    /// Raw scores (logits), one row per image.
    pub fn predict(&self, images: &[&NormalizedImage]) -> Result<Vec<Vec<f32>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.batch_tensor(images)?;
        Ok(self.predict_tensor(&x)?.to_vec2::<f32>()?)
    }

    /// Training-mode forward. The backbone runs in training mode only when
    /// fine-tuning; a frozen backbone keeps its running statistics and
    /// skips dropout, and its output is detached from the graph.
    pub fn forward_train(&self, x: &Tensor, with_aux: bool, seed: u64) -> Result<TrainOutput> {
        self.check_batch(x)?;
        let fine_tune = self.mode == TransferMode::FineTune;
        let mut ctx = Ctx { train: fine_tune, aux: fine_tune && with_aux, rng: ChaCha8Rng::seed_from_u64(seed) };
        let (features, aux) = self.backbone.forward(x, &mut ctx)?;
        let features = if fine_tune { features } else { features.detach() };
        let logits = self.head.forward(&features)?;
        let aux_logits = match (aux, &self.aux_head) {
            (Some(a), Some(h)) => Some(h.forward(&a)?),
            _ => None,
        };
        Ok(TrainOutput { logits, aux_logits })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        checkpoint::save(self, path.as_ref())
    }

    pub fn load_checkpoint(path: impl AsRef<std::path::Path>) -> Result<Self> {
        checkpoint::load(path.as_ref())
    }
}

fn boxed<B: Backbone + 'static>((b, f): (B, usize)) -> (Box<dyn Backbone>, usize) {
    (Box::new(b), f)
}

pub(crate) fn set_param(p: &Param, t: &Tensor) -> Result<()> {
    if t.dims() != p.shape() {
        return Err(ModelError::IncompatibleWeights(format!(
            "`{}` has shape {:?}, expected {:?}",
            p.name,
            t.dims(),
            p.shape()
        )));
    }
    let t = t.to_dtype(candle_core::DType::F32)?.to_device(p.var.device())?;
    p.var.set(&t)?;
    Ok(())
}

/// Var handles of the trainable parameters, for the optimizer.
pub(crate) fn trainable_vars(h: &ModelHandle) -> Vec<Var> {
    h.trainable_params().map(|p| p.var.clone()).collect()
}

/// Numerically stable softmax of one score row.
pub fn softmax(scores: &[f32]) -> Vec<f32> {
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = scores.iter().map(|&s| ((s - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| (e / sum) as f32).collect()
}

/// Index of the first maximal score.
pub fn argmax(scores: &[f32]) -> usize {
    scores
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
