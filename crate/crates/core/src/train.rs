//! The training protocol: momentum SGD with step decay on a class-weighted
//! cross-entropy, one train and one validation pass per epoch.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{resolve_image_path, SampleRecord, Split};
use crate::imaging::{apply_transform, load_image, PipelineError, Rgb32FImage, TransformSpec};
use crate::metrics::{Prediction, PredictionSet};
use crate::zoo::{self, argmax, softmax, ModelError, ModelHandle, ParamGroup, TransferMode};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("model has {model} classes but the data has {data}")]
    ClassCountMismatch { model: usize, data: usize },
    #[error("{0} split is empty")]
    EmptySplit(Split),
    #[error("label {label} outside [0, {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: PipelineError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Backend(#[from] candle_core::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub epochs: usize,
    /// Per-class loss weights; empty means all 1.0.
    pub class_weights: Vec<f64>,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the auxiliary-classifier loss when fine-tuning a network
    /// that has one. Zero disables the auxiliary head.
    pub aux_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            lr_step: 7,
            lr_gamma: 0.1,
            epochs: 10,
            class_weights: Vec::new(),
            batch_size: 32,
            seed: 0,
            aux_loss_weight: 0.4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad(format!("lr_gamma must lie in (0, 1], got {}", self.lr_gamma));
        }
        if self.lr_step == 0 {
            return bad("lr_step must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.aux_loss_weight < 0.0 {
            return bad(format!("aux_loss_weight must be nonnegative, got {}", self.aux_loss_weight));
        }
        if !self.class_weights.is_empty() {
            if self.class_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                return bad("class weights must be finite and nonnegative".into());
            }
            if !self.class_weights.iter().any(|w| *w > 0.0) {
                return bad("at least one class weight must be positive".into());
            }
        }
        Ok(())
    }

    /// Class weights expanded to `k` entries.
    pub fn weights_for(&self, k: usize) -> Result<Vec<f64>> {
        if self.class_weights.is_empty() {
            return Ok(vec![1.0; k]);
        }
        if self.class_weights.len() != k {
            return Err(TrainError::InvalidConfig(format!(
                "{} class weights given for {k} classes",
                self.class_weights.len()
            )));
        }
        Ok(self.class_weights.clone())
    }
}

/// Weights proportional to the inverse class size, scaled so the largest
/// class gets 1.0. Empty classes get weight 0.
pub fn inverse_frequency_weights(counts: &[usize]) -> Vec<f64> {
    let max = counts.iter().copied().max().unwrap_or(0) as f64;
    counts.iter().map(|&c| if c == 0 { 0.0 } else { max / c as f64 }).collect()
}

/// Step decay: the rate is multiplied by gamma once per completed step, in
/// the same order a step scheduler applies it.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let mut lr = config.learning_rate;
    for _ in 0..epoch / config.lr_step.max(1) {
        lr *= config.lr_gamma;
    }
    lr
}

/// Weighted-mean cross-entropy of raw scores: sum_i w_{y_i} * nll_i divided
/// by sum_i w_{y_i}. A batch whose labels all carry zero weight has loss 0.
pub fn weighted_cross_entropy(scores: &[Vec<f32>], labels: &[usize], weights: &[f64]) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (row, &y) in scores.iter().zip(labels) {
        if y >= row.len() || y >= weights.len() {
            return Err(TrainError::LabelOutOfRange { label: y, num_classes: row.len().min(weights.len()) });
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&s| (s as f64 - max).exp()).sum::<f64>().ln();
        num += weights[y] * (lse - row[y] as f64);
        den += weights[y];
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Differentiable counterpart of [`weighted_cross_entropy`] for an (N, K)
/// logits tensor.
pub fn weighted_cross_entropy_tensor(logits: &Tensor, labels: &[usize], weights: &[f64]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(TrainError::InvalidConfig(format!("{} labels for {n} score rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= k || y >= weights.len()) {
        return Err(TrainError::LabelOutOfRange { label, num_classes: k });
    }
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let log_probs = shifted.broadcast_sub(&shifted.exp()?.sum_keepdim(1)?.log()?)?;
    let idx: Vec<u32> = labels.iter().map(|&y| y as u32).collect();
    let idx = Tensor::from_vec(idx, (n, 1), logits.device())?;
    let nll = log_probs.gather(&idx, 1)?.squeeze(1)?.neg()?;
    let w: Vec<f32> = labels.iter().map(|&y| weights[y] as f32).collect();
    let total: f64 = labels.iter().map(|&y| weights[y]).sum();
    let w = Tensor::from_vec(w, n, logits.device())?;
    let scale = if total > 0.0 { 1.0 / total } else { 0.0 };
    Ok((nll.mul(&w)?.sum_all()? * scale)?)
}

/// SGD with heavy-ball momentum: v <- momentum * v + grad, theta <- theta - lr * v.
/// The first step initializes the buffer to the gradient.
pub struct MomentumSgd {
    vars: Vec<Var>,
    momentum: f64,
    buffers: Vec<Option<Tensor>>,
}

impl MomentumSgd {
    pub fn new(vars: Vec<Var>, momentum: f64) -> Self {
        let buffers = vec![None; vars.len()];
        Self { vars, momentum, buffers }
    }

    pub fn step(&mut self, grads: &candle_core::backprop::GradStore, lr: f64) -> Result<()> {
        for (var, buf) in self.vars.iter().zip(self.buffers.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let v = match buf.take() {
                Some(prev) => ((prev * self.momentum)? + g)?,
                None => g.clone(),
            };
            var.set(&(var.as_tensor() - (&v * lr)?)?)?;
            *buf = Some(v);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub architecture: String,
    pub mode: TransferMode,
    pub pretrained: bool,
    pub config: TrainConfig,
    pub records: Vec<EpochRecord>,
    pub best_validation_accuracy: f64,
    pub best_epoch: usize,
    pub wall_time: f64,
    pub checkpoint_path: Option<PathBuf>,
    pub best_checkpoint_path: Option<PathBuf>,
}

impl RunRecord {
    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.phase == phase)
    }

    pub fn last(&self, phase: Phase) -> Option<&EpochRecord> {
        self.phase(phase).last()
    }
}

/// Loads images from disk relative to a root, optionally memoizing decoded
/// images. Shared across runs and threads.
pub struct ImageLoader {
    root: PathBuf,
    cache: Option<Mutex<HashMap<PathBuf, Arc<Rgb32FImage>>>>,
}

impl ImageLoader {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), cache: None }
    }

    pub fn cached(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), cache: Some(Mutex::new(HashMap::new())) }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn load(&self, sample: &SampleRecord) -> Result<Arc<Rgb32FImage>> {
        let path = resolve_image_path(&self.root, sample);
        if let Some(cache) = &self.cache {
            if let Some(img) = cache.lock().expect("cache lock").get(&path) {
                return Ok(img.clone());
            }
        }
        let img = Arc::new(load_image(&path).map_err(|source| TrainError::Image { path: path.clone(), source })?);
        if let Some(cache) = &self.cache {
            cache.lock().expect("cache lock").insert(path, img.clone());
        }
        Ok(img)
    }
}

/// A split ready for training or evaluation.
pub struct SplitData<'a> {
    pub split: Split,
    pub samples: &'a [SampleRecord],
    pub num_classes: usize,
    pub spec: TransformSpec,
    pub loader: &'a ImageLoader,
}

/// Where and whether [`train`] writes checkpoints.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPolicy {
    pub dir: Option<PathBuf>,
    /// Also keep the parameters of the best validation epoch.
    pub keep_best: bool,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_split(handle: &ModelHandle, data: &SplitData) -> Result<()> {
    if data.num_classes != handle.num_classes() {
        return Err(TrainError::ClassCountMismatch { model: handle.num_classes(), data: data.num_classes });
    }
    if data.samples.is_empty() {
        return Err(TrainError::EmptySplit(data.split));
    }
    if let Some(s) = data.samples.iter().find(|s| s.label >= data.num_classes) {
        return Err(TrainError::LabelOutOfRange { label: s.label, num_classes: data.num_classes });
    }
    Ok(())
}

fn batch_input(handle: &ModelHandle, data: &SplitData, idx: &[usize], seeds: impl Fn(usize) -> u64) -> Result<Tensor> {
    let mut images = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = &data.samples[i];
        let img = data.loader.load(s)?;
        let t = apply_transform(&img, &data.spec, seeds(i))
            .map_err(|source| TrainError::Image { path: s.image_path.clone(), source })?;
        images.push(t);
    }
    let refs: Vec<_> = images.iter().collect();
    Ok(handle.batch_tensor(&refs)?)
}

/// Trains `handle` in place for `config.epochs` epochs.
pub fn train(
    handle: &mut ModelHandle,
    train_set: &SplitData,
    val_set: &SplitData,
    config: &TrainConfig,
    checkpoints: &CheckpointPolicy,
) -> Result<RunRecord> {
    config.validate()?;
    check_split(handle, train_set)?;
    check_split(handle, val_set)?;
    let weights = config.weights_for(handle.num_classes())?;
    let start = Instant::now();
    let use_aux =
        handle.mode() == TransferMode::FineTune && handle.has_aux_head() && config.aux_loss_weight > 0.0;
    let mut opt = MomentumSgd::new(zoo::trainable_vars(handle), config.momentum);
    let mut records = Vec::with_capacity(2 * config.epochs);
    let mut best = (f64::NEG_INFINITY, 0);
    // A frozen backbone maps each deterministic eval input to fixed
    // features, so validation only needs the backbone once per run.
    let mut val_cache = (handle.mode() == TransferMode::FeatureExtract).then(Vec::new);
    let best_path = checkpoints.dir.as_ref().filter(|_| checkpoints.keep_best).map(|d| d.join("best.ckpt"));

    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config, epoch);
        let mut order: Vec<usize> = (0..train_set.samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64, 0)));

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = batch_input(handle, train_set, chunk, |i| mix(config.seed, epoch as u64, 1 + i as u64))?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.samples[i].label).collect();
            let out = handle.forward_train(&x, use_aux, mix(config.seed, epoch as u64, u64::MAX - bi as u64))?;
            let mut loss = weighted_cross_entropy_tensor(&out.logits, &labels, &weights)?;
            if let Some(aux) = &out.aux_logits {
                let aux_loss = weighted_cross_entropy_tensor(aux, &labels, &weights)?;
                loss = (loss + (aux_loss * config.aux_loss_weight)?)?;
            }
            let grads = loss.backward()?;
            opt.step(&grads, lr)?;
            loss_sum += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
            let scores = out.logits.detach().to_vec2::<f32>()?;
            correct += scores.iter().zip(&labels).filter(|(s, &y)| argmax(s) == y).count();
        }
        let n = train_set.samples.len() as f64;
        records.push(EpochRecord { epoch, phase: Phase::Train, loss: loss_sum / n, accuracy: correct as f64 / n });

        let scores = score_split(handle, val_set, config.batch_size, val_cache.as_mut())?;
        let (_, val) = summarize_scores(handle, val_set, scores, &weights, epoch)?;
        if val.accuracy > best.0 {
            best = (val.accuracy, epoch);
            if let Some(p) = &best_path {
                handle.save_checkpoint(p)?;
            }
        }
        records.push(EpochRecord { phase: Phase::Validation, ..val });
    }

    let checkpoint_path = match &checkpoints.dir {
        Some(dir) => {
            let p = dir.join("final.ckpt");
            handle.save_checkpoint(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(RunRecord {
        architecture: handle.architecture().name.clone(),
        mode: handle.mode(),
        pretrained: handle.pretrained(),
        config: config.clone(),
        records,
        best_validation_accuracy: best.0,
        best_epoch: best.1,
        wall_time: start.elapsed().as_secs_f64(),
        checkpoint_path,
        best_checkpoint_path: best_path,
    })
}

/// Scores a split without touching parameters. The loss uses uniform class
/// weights.
pub fn evaluate(handle: &ModelHandle, data: &SplitData, batch_size: usize) -> Result<(PredictionSet, EpochRecord)> {
    let weights = vec![1.0; handle.num_classes()];
    evaluate_with_weights(handle, data, batch_size, &weights, 0)
}

pub fn evaluate_with_weights(
    handle: &ModelHandle,
    data: &SplitData,
    batch_size: usize,
    weights: &[f64],
    epoch: usize,
) -> Result<(PredictionSet, EpochRecord)> {
    let scores = score_split(handle, data, batch_size, None)?;
    summarize_scores(handle, data, scores, weights, epoch)
}

/// Inference scores for every sample of a split, in sample order. With a
/// cache, backbone features are computed on the first call and reused.
fn score_split(
    handle: &ModelHandle,
    data: &SplitData,
    batch_size: usize,
    mut cache: Option<&mut Vec<Tensor>>,
) -> Result<Vec<Vec<f32>>> {
    check_split(handle, data)?;
    let idx: Vec<usize> = (0..data.samples.len()).collect();
    let mut scores = Vec::with_capacity(idx.len());
    for (bi, chunk) in idx.chunks(batch_size.max(1)).enumerate() {
        let features = match cache.as_deref_mut() {
            Some(c) if bi < c.len() => c[bi].clone(),
            c => {
                let f = handle.features_eval(&batch_input(handle, data, chunk, |_| 0)?)?;
                if let Some(c) = c {
                    c.push(f.clone());
                }
                f
            }
        };
        scores.extend(handle.head_eval(&features)?.to_vec2::<f32>()?);
    }
    Ok(scores)
}

fn summarize_scores(
    handle: &ModelHandle,
    data: &SplitData,
    scores: Vec<Vec<f32>>,
    weights: &[f64],
    epoch: usize,
) -> Result<(PredictionSet, EpochRecord)> {
    let mut set = PredictionSet::new(handle.num_classes());
    for (s, row) in data.samples.iter().zip(&scores) {
        set.records.push(Prediction {
            sample_path: s.image_path.to_string_lossy().into_owned(),
            truth: s.label,
            predicted: argmax(row),
            probabilities: softmax(row),
            patient_id: s.patient_id.clone(),
            eye: s.eye,
        });
    }
    let loss = weighted_cross_entropy(&scores, &set.truths(), weights)?;
    let correct = set.records.iter().filter(|r| r.truth == r.predicted).count();
    let record = EpochRecord { epoch, phase: Phase::Validation, loss, accuracy: correct as f64 / set.len() as f64 };
    Ok((set, record))
}

/// Snapshot of a handle's backbone, for freeze checks.
pub fn backbone_snapshot(handle: &ModelHandle) -> Result<Vec<u8>> {
    Ok(handle.snapshot(ParamGroup::Backbone)?)
}
