//! Experiment configuration files.
//!
//! Flat `key = value` text under `[section]` headers. List values are
//! comma-separated, and every list-valued axis multiplies the grid:
//!
//! ```text
//! [experiment]
//! name = smoke
//! manifest = data/manifest.tsv
//! output_dir = out
//! preprocess = off
//!
//! [model]
//! architecture = AlexNet, ResNet-18
//! pretrained = true, false
//! mode = fine_tune, feature_extract
//!
//! [train]
//! epochs = 10
//! seed = 0, 1, 2
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use retina_bench::imaging::GrahamParams;
use retina_bench::metrics::BinarizationScheme;
use retina_bench::train::{TrainConfig, TrainError};
use retina_bench::zoo::{Architecture, TransferMode};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("config field `{field}`: {reason}")]
    Field { field: String, reason: String },
}

fn field_error(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: field.to_string(), reason: reason.into() }
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeights {
    #[default]
    Uniform,
    /// Inverse class frequency of the training split, largest class at 1.0.
    InverseFrequency,
    Explicit(Vec<f64>),
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub max_parallel: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub manifest_path: PathBuf,
    /// Directory image paths in the manifest are relative to.
    pub image_root: PathBuf,
    pub output_dir: PathBuf,
    pub architectures: Vec<String>,
    pub pretrained: Vec<bool>,
    pub modes: Vec<TransferMode>,
    pub learning_rates: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Scalar training settings; learning rate and seed come from the axes.
    pub train: TrainConfig,
    pub class_weights: ClassWeights,
    /// `None` when preprocessing is off.
    pub preprocess: Option<GrahamParams>,
    pub binarization: Vec<BinarizationScheme>,
    pub max_parallel: usize,
}

/// One point of the grid. Everything that influences a run's numbers lives
/// here, so its hash identifies the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: String,
    pub architecture: String,
    pub pretrained: bool,
    pub mode: TransferMode,
    pub train: TrainConfig,
    pub class_weights: ClassWeights,
    pub preprocess: Option<GrahamParams>,
    pub binarization: Vec<BinarizationScheme>,
    /// SHA-256 of the manifest file.
    pub manifest_digest: String,
}

const KEYS: &[(&str, &[&str])] = &[
    ("experiment", &["name", "manifest", "image_root", "output_dir", "max_parallel", "binarization", "preprocess"]),
    ("model", &["architecture", "pretrained", "mode"]),
    (
        "train",
        &["learning_rate", "momentum", "lr_step", "lr_gamma", "epochs", "batch_size", "class_weights", "seed", "aux_loss_weight"],
    ),
    ("preprocess", &["target_radius", "target_gray", "clip_fraction", "blur_scale"]),
];

struct Fields {
    entries: Vec<(String, String)>,
}

impl Fields {
    fn raw(&self, field: &str) -> Option<&str> {
        self.entries.iter().rev().find(|(k, _)| k == field).map(|(_, v)| v.as_str())
    }

    fn list<T>(&self, field: &str, default: Vec<T>, parse: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>> {
        let Some(raw) = self.raw(field) else { return Ok(default) };
        let items: Vec<&str> = raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(field_error(field, "no values given"));
        }
        items.into_iter().map(|s| parse(s).map_err(|e| field_error(field, e))).collect()
    }

    fn scalar<T>(&self, field: &str, default: T, parse: impl Fn(&str) -> Result<T, String>) -> Result<T> {
        let mut values = self.list(field, vec![default], parse)?;
        if values.len() != 1 {
            return Err(field_error(field, "expects a single value, not a list"));
        }
        Ok(values.remove(0))
    }
}

fn parse_from<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| format!("`{s}`: {e}"))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("`{s}` is not a boolean")),
    }
}

fn parse_architecture(s: &str) -> Result<String, String> {
    s.parse::<Architecture>().map(|a| a.name().to_string()).map_err(|e| e.to_string())
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// Maps a training-config validation message onto the key it is about.
fn train_field(err: TrainError) -> ConfigError {
    let msg = err.to_string();
    let reason = msg.trim_start_matches("invalid training config: ").to_string();
    let key = KEYS[2].1.iter().find(|k| reason.starts_with(**k)).copied().unwrap_or("class_weights");
    field_error(&format!("train.{key}"), reason)
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>, overrides: &Overrides) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.to_path_buf(), reason: e.to_string() })?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::parse(&text, base, overrides)
    }

    /// Parses config text; relative paths are taken relative to `base`.
    pub fn parse(text: &str, base: &Path, overrides: &Overrides) -> Result<Self> {
        let ini = Ini::load_from_str(text)
            .map_err(|e| ConfigError::Read { path: base.to_path_buf(), reason: e.to_string() })?;
        let mut entries = Vec::new();
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                let Some(section) = section else {
                    return Err(field_error(key, "keys must sit under a [section] header"));
                };
                let Some((_, keys)) = KEYS.iter().find(|(s, _)| *s == section) else {
                    return Err(field_error(&format!("{section}.{key}"), format!("unknown section [{section}]")));
                };
                if !keys.contains(&key) {
                    return Err(field_error(&format!("{section}.{key}"), "unknown key"));
                }
                entries.push((format!("{section}.{key}"), value.to_string()));
            }
        }
        let f = Fields { entries };
        let defaults = TrainConfig::default();

        let name = f.scalar("experiment.name", "experiment".to_string(), |s| Ok(s.to_string()))?;
        let manifest = f.raw("experiment.manifest").ok_or_else(|| field_error("experiment.manifest", "required"))?;
        let manifest_path = resolve(base, manifest.trim());
        let image_root = match f.raw("experiment.image_root") {
            Some(r) => resolve(base, r.trim()),
            None => manifest_path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        let output_dir = match (&overrides.output_dir, f.raw("experiment.output_dir")) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => resolve(base, o.trim()),
            (None, None) => return Err(field_error("experiment.output_dir", "required (or pass --out)")),
        };
        let max_parallel = match overrides.max_parallel {
            Some(m) => m,
            None => f.scalar("experiment.max_parallel", 1usize, parse_from)?,
        };
        if max_parallel == 0 {
            return Err(field_error("experiment.max_parallel", "must be at least 1"));
        }
        let binarization = f.list("experiment.binarization", BinarizationScheme::ALL.to_vec(), parse_from)?;

        let architectures = f.list("model.architecture", Vec::new(), parse_architecture)?;
        if architectures.is_empty() {
            return Err(field_error("model.architecture", "required"));
        }
        let pretrained = f.list("model.pretrained", vec![true], parse_bool)?;
        let modes = f.list("model.mode", vec![TransferMode::FineTune], parse_from)?;

        let learning_rates = f.list("train.learning_rate", vec![defaults.learning_rate], parse_from)?;
        let seeds = match overrides.seed {
            Some(s) => vec![s],
            None => f.list("train.seed", vec![defaults.seed], parse_from)?,
        };
        let train = TrainConfig {
            learning_rate: learning_rates[0],
            momentum: f.scalar("train.momentum", defaults.momentum, parse_from)?,
            lr_step: f.scalar("train.lr_step", defaults.lr_step, parse_from)?,
            lr_gamma: f.scalar("train.lr_gamma", defaults.lr_gamma, parse_from)?,
            epochs: f.scalar("train.epochs", defaults.epochs, parse_from)?,
            class_weights: Vec::new(),
            batch_size: f.scalar("train.batch_size", defaults.batch_size, parse_from)?,
            seed: seeds[0],
            aux_loss_weight: f.scalar("train.aux_loss_weight", defaults.aux_loss_weight, parse_from)?,
        };
        let class_weights = match f.raw("train.class_weights").map(str::trim) {
            None | Some("uniform") => ClassWeights::Uniform,
            Some("inverse_frequency") => ClassWeights::InverseFrequency,
            Some(_) => ClassWeights::Explicit(f.list("train.class_weights", Vec::new(), parse_from)?),
        };
        for &lr in &learning_rates {
            let mut check = TrainConfig { learning_rate: lr, ..train.clone() };
            if let ClassWeights::Explicit(w) = &class_weights {
                check.class_weights = w.clone();
            }
            check.validate().map_err(train_field)?;
        }

        let preprocess = match f.scalar("experiment.preprocess", "off".to_string(), |s| Ok(s.to_ascii_lowercase()))?.as_str() {
            "off" | "none" | "false" => None,
            "graham" | "on" | "true" => {
                let d = GrahamParams::default();
                let params = GrahamParams {
                    target_radius: f.scalar("preprocess.target_radius", d.target_radius, parse_from)?,
                    target_gray: f.scalar("preprocess.target_gray", d.target_gray, parse_from)?,
                    clip_fraction: f.scalar("preprocess.clip_fraction", d.clip_fraction, parse_from)?,
                    blur_scale: f.scalar("preprocess.blur_scale", d.blur_scale, parse_from)?,
                };
                params.validate().map_err(|e| {
                    let reason = e.to_string();
                    let key = KEYS[3].1.iter().find(|k| reason.contains(**k)).copied().unwrap_or("target_radius");
                    field_error(&format!("preprocess.{key}"), reason)
                })?;
                Some(params)
            }
            other => return Err(field_error("experiment.preprocess", format!("`{other}` is neither off nor graham"))),
        };

        Ok(Self {
            name,
            manifest_path,
            image_root,
            output_dir,
            architectures,
            pretrained,
            modes,
            learning_rates,
            seeds,
            train,
            class_weights,
            preprocess,
            binarization,
            max_parallel,
        })
    }

    /// Number of runs the grid expands to.
    pub fn grid_size(&self) -> usize {
        self.architectures.len() * self.pretrained.len() * self.modes.len() * self.learning_rates.len() * self.seeds.len()
    }

    /// Cartesian product of the list-valued axes, architecture outermost and
    /// seed innermost.
    pub fn expand(&self, manifest_digest: &str) -> Vec<RunConfig> {
        let mut out = Vec::with_capacity(self.grid_size());
        for arch in &self.architectures {
            for &pretrained in &self.pretrained {
                for &mode in &self.modes {
                    for &learning_rate in &self.learning_rates {
                        for &seed in &self.seeds {
                            out.push(RunConfig {
                                experiment: self.name.clone(),
                                architecture: arch.clone(),
                                pretrained,
                                mode,
                                train: TrainConfig { learning_rate, seed, ..self.train.clone() },
                                class_weights: self.class_weights.clone(),
                                preprocess: self.preprocess,
                                binarization: self.binarization.clone(),
                                manifest_digest: manifest_digest.to_string(),
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

impl RunConfig {
    /// Short stable identifier: the first 16 hex digits of the SHA-256 of the
    /// config's JSON encoding.
    pub fn run_id(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("run configs always serialize");
        hex(&Sha256::digest(json))[..16].to_string()
    }

    /// Group key in the `np`/`p` x `ft`/`fe` naming used by the report tables.
    pub fn group(&self) -> String {
        group_key(self.pretrained, self.mode)
    }
}

pub fn group_key(pretrained: bool, mode: TransferMode) -> String {
    let p = if pretrained { "p" } else { "np" };
    let m = match mode {
        TransferMode::FineTune => "ft",
        TransferMode::FeatureExtract => "fe",
    };
    format!("{p}_{m}")
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file, hex encoded.
pub fn file_digest(path: &Path) -> std::io::Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}
