//! Single-run execution and the artifacts it leaves behind.
//!
//! A run directory holds `run.json`, `metrics.csv` (one row per epoch),
//! `evaluation.csv`, a predictions file per evaluated split and level, the
//! curve and confusion-matrix plots, and `checkpoints/`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use retina_bench::dataset::{class_distribution, load_manifest, DatasetManifest, Split};
use retina_bench::imaging::TransformSpec;
use retina_bench::metrics::{
    binarize, binary_accuracy, blend_to_patient, confusion_matrix, kappa_category, quadratic_weighted_kappa,
    sensitivity, specificity, write_predictions, BinarizationScheme, BinaryConfusion, PredictionSet,
};
use retina_bench::stats::train_val_ratio;
use retina_bench::train::{
    evaluate, inverse_frequency_weights, train, CheckpointPolicy, ImageLoader, Phase, RunRecord, SplitData,
};
use retina_bench::zoo::{build_model, Architecture};
use serde::{Deserialize, Serialize};

use crate::config::{file_digest, ClassWeights, ConfigError, ExperimentConfig, RunConfig};
use crate::error::{CliError, Result};
use crate::{plots, prep};

/// Corpora up to this size keep decoded images in memory across epochs.
const IMAGE_CACHE_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Eye,
    Patient,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Eye => "eye",
            Self::Patient => "patient",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryEvaluation {
    pub scheme: BinarizationScheme,
    pub confusion: BinaryConfusion,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Metrics of the final model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub split: Split,
    pub level: Level,
    pub predictions_file: String,
    pub n: usize,
    pub accuracy: f64,
    /// Absent when the marginals make kappa undefined.
    pub kappa: Option<f64>,
    pub kappa_category: Option<String>,
    pub confusion: Vec<Vec<u64>>,
    pub binary: Vec<BinaryEvaluation>,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDocument {
    pub run_id: String,
    pub config: RunConfig,
    pub class_names: Vec<String>,
    pub record: RunRecord,
    pub evaluations: Vec<Evaluation>,
}

impl RunDocument {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("run.json");
        let text = fs::read_to_string(&path).map_err(|_| CliError::MissingArtifacts(path.clone()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn evaluation(&self, split: Split, level: Level) -> Option<&Evaluation> {
        self.evaluations.iter().find(|e| e.split == split && e.level == level)
    }
}

/// A manifest ready for training, with its image source.
pub struct PreparedData {
    pub manifest: DatasetManifest,
    pub loader: ImageLoader,
}

pub fn manifest_digest(exp: &ExperimentConfig) -> Result<String> {
    file_digest(&exp.manifest_path).map_err(|e| {
        ConfigError::Field {
            field: "experiment.manifest".into(),
            reason: format!("{}: {e}", exp.manifest_path.display()),
        }
        .into()
    })
}

/// Loads the manifest and, when configured, preprocesses the corpus into
/// `<output_dir>/preprocessed/`.
pub fn prepare_data(exp: &ExperimentConfig) -> Result<PreparedData> {
    let manifest = load_manifest(&exp.manifest_path)?;
    if let ClassWeights::Explicit(w) = &exp.class_weights {
        if w.len() != manifest.num_classes() {
            return Err(ConfigError::Field {
                field: "train.class_weights".into(),
                reason: format!("{} weights for {} classes", w.len(), manifest.num_classes()),
            }
            .into());
        }
    }
    let (manifest, root) = match &exp.preprocess {
        None => (manifest, exp.image_root.clone()),
        Some(params) => {
            let cache = exp.output_dir.join("preprocessed").join(prep::params_key(params));
            log::info!("preprocessing {} images into {}", manifest.samples().len(), cache.display());
            (prep::preprocess_manifest(&manifest, &exp.image_root, &cache, params)?, cache)
        }
    };
    let loader = if manifest.samples().len() <= IMAGE_CACHE_LIMIT {
        ImageLoader::cached(root)
    } else {
        ImageLoader::new(root)
    };
    Ok(PreparedData { manifest, loader })
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt6).unwrap_or_default()
}

/// `metrics.csv`: one row per epoch, fixed six-decimal formatting.
pub fn metrics_csv(record: &RunRecord) -> String {
    let ratios = train_val_ratio(record).ok().map(|r| r.per_epoch_ratios);
    let mut out = String::from("epoch,train_loss,train_accuracy,validation_loss,validation_accuracy,loss_ratio\n");
    for (i, t) in record.phase(Phase::Train).enumerate() {
        let v = record.phase(Phase::Validation).find(|v| v.epoch == t.epoch);
        let ratio = ratios.as_ref().and_then(|r| r.get(i).copied());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            t.epoch,
            fmt6(t.loss),
            fmt6(t.accuracy),
            fmt_opt(v.map(|v| v.loss)),
            fmt_opt(v.map(|v| v.accuracy)),
            fmt_opt(ratio)
        );
    }
    out
}

/// `evaluation.csv`: split, level, metric, value.
pub fn evaluation_csv(evaluations: &[Evaluation]) -> String {
    let mut out = String::from("split,level,metric,value\n");
    for e in evaluations {
        let mut row = |metric: &str, value: String| {
            let _ = writeln!(out, "{},{},{metric},{value}", e.split.as_str(), e.level.as_str());
        };
        row("n", e.n.to_string());
        row("accuracy", fmt6(e.accuracy));
        row("kappa", fmt_opt(e.kappa));
        for b in &e.binary {
            row(&format!("sensitivity_{}", b.scheme), fmt_opt(b.sensitivity));
            row(&format!("specificity_{}", b.scheme), fmt_opt(b.specificity));
        }
    }
    out
}

pub fn evaluate_predictions(
    set: &PredictionSet,
    split: Split,
    level: Level,
    file: &str,
    schemes: &[BinarizationScheme],
) -> Result<Evaluation> {
    let cm = confusion_matrix(set, set.num_classes)?;
    let kappa = quadratic_weighted_kappa(&cm).ok().map(|k| k.kappa);
    let binary = schemes
        .iter()
        .map(|&scheme| {
            let bc = binarize(&cm, scheme);
            BinaryEvaluation {
                scheme,
                confusion: bc,
                sensitivity: sensitivity(&bc).ok(),
                specificity: specificity(&bc).ok(),
                accuracy: binary_accuracy(&bc).ok(),
            }
        })
        .collect();
    Ok(Evaluation {
        split,
        level,
        predictions_file: file.to_string(),
        n: set.len(),
        accuracy: retina_bench::metrics::accuracy(&cm)?,
        kappa,
        kappa_category: kappa.map(|k| kappa_category(k).to_string()),
        confusion: cm.counts().to_vec(),
        binary,
    })
}

/// Trains and evaluates one configuration, writing every artifact into
/// `dir`. Errors carry the run id.
pub fn execute_run(cfg: &RunConfig, data: &PreparedData, dir: &Path) -> Result<RunDocument> {
    let run_id = cfg.run_id();
    execute_inner(cfg, &run_id, data, dir).map_err(|e| e.in_run(&run_id))
}

fn execute_inner(cfg: &RunConfig, run_id: &str, data: &PreparedData, dir: &Path) -> Result<RunDocument> {
    let manifest = &data.manifest;
    let k = manifest.num_classes();
    let edge = cfg.architecture.parse::<Architecture>()?.input_edge();
    fs::create_dir_all(dir.join("checkpoints"))?;

    let mut tc = cfg.train.clone();
    tc.class_weights = match &cfg.class_weights {
        ClassWeights::Uniform => Vec::new(),
        ClassWeights::InverseFrequency => inverse_frequency_weights(&class_distribution(manifest, Split::Train)?.counts),
        ClassWeights::Explicit(w) => w.clone(),
    };
    let train_samples = manifest.split_samples(Split::Train);
    let val_samples = manifest.split_samples(Split::Validation);
    let test_samples = manifest.split_samples(Split::Test);
    let split = |split, samples, spec| SplitData { split, samples, num_classes: k, spec, loader: &data.loader };
    let eval_spec = TransformSpec::eval_for_input(edge);

    log::info!("run {run_id}: {} pretrained={} mode={} seed={}", cfg.architecture, cfg.pretrained, cfg.mode.as_str(), tc.seed);
    let mut handle = build_model(&cfg.architecture, k, cfg.pretrained, cfg.mode, tc.seed)?;
    let policy = CheckpointPolicy { dir: Some(dir.join("checkpoints")), keep_best: true };
    let record = train(
        &mut handle,
        &split(Split::Train, &train_samples, TransformSpec::train(edge)),
        &split(Split::Validation, &val_samples, eval_spec),
        &tc,
        &policy,
    )?;

    let mut evaluations = Vec::new();
    for (s, samples) in [(Split::Validation, &val_samples), (Split::Test, &test_samples)] {
        if samples.is_empty() {
            continue;
        }
        let (preds, _) = evaluate(&handle, &split(s, samples, eval_spec), tc.batch_size)?;
        let file = format!("predictions_{}.tsv", s.as_str());
        write_predictions(&preds, dir.join(&file))?;
        evaluations.push(evaluate_predictions(&preds, s, Level::Eye, &file, &cfg.binarization)?);
        if preds.records.iter().all(|r| r.patient_id.is_some()) {
            let blended = blend_to_patient(&preds)?;
            let file = format!("predictions_{}_patient.tsv", s.as_str());
            write_predictions(&blended, dir.join(&file))?;
            evaluations.push(evaluate_predictions(&blended, s, Level::Patient, &file, &cfg.binarization)?);
        }
    }

    let doc = RunDocument {
        run_id: run_id.to_string(),
        config: cfg.clone(),
        class_names: manifest.class_names().to_vec(),
        record,
        evaluations,
    };
    write_artifacts(&doc, dir)?;
    Ok(doc)
}

/// Writes `run.json`, the CSVs and the plots of a finished run.
pub fn write_artifacts(doc: &RunDocument, dir: &Path) -> Result<()> {
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(doc)?)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&doc.record))?;
    fs::write(dir.join("evaluation.csv"), evaluation_csv(&doc.evaluations))?;
    render_run_plots(doc, dir)?;
    Ok(())
}

/// Loss and accuracy curves plus a confusion heatmap per eye-level split.
pub fn render_run_plots(doc: &RunDocument, dir: &Path) -> Result<Vec<PathBuf>> {
    let title = format!("{} {} ({})", doc.config.architecture, doc.config.group(), doc.run_id);
    let mut written = vec![dir.join("loss_curve.png"), dir.join("acc_curve.png")];
    plots::training_curves(&doc.record, &title, &written[0], &written[1])?;
    for e in doc.evaluations.iter().filter(|e| e.level == Level::Eye) {
        let path = dir.join(format!("confusion_{}.png", e.split.as_str()));
        let t = format!("{} {} ({})", doc.config.architecture, e.split.as_str(), doc.run_id);
        plots::confusion_heatmap(&e.confusion, &doc.class_names, &t, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// The `run` verb: the config must describe exactly one combination, whose
/// artifacts go straight into the output directory.
pub fn run_command(exp: &ExperimentConfig) -> Result<RunDocument> {
    if exp.grid_size() != 1 {
        return Err(ConfigError::Field {
            field: "model".into(),
            reason: format!("run needs a single combination but the config expands to {}; use grid", exp.grid_size()),
        }
        .into());
    }
    let digest = manifest_digest(exp)?;
    let cfg = exp.expand(&digest).remove(0);
    let data = prepare_data(exp)?;
    execute_run(&cfg, &data, &exp.output_dir)
}
