//! Evaluation metrics computed from prediction sets: confusion matrices,
//! screening binarizations, sensitivity/specificity, quadratic weighted kappa
//! and eye-to-patient blending.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Eye;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("label {label} outside [0, {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("{0} is undefined: zero denominator")]
    UndefinedMetric(&'static str),
    #[error("kappa is undefined: both raters put all mass in one class")]
    DegenerateMarginals,
    #[error("prediction for `{0}` has no patient_id")]
    MissingPatientId(String),
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("malformed predictions file at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_path: String,
    pub truth: usize,
    pub predicted: usize,
    /// Empty for blended patient-level records.
    pub probabilities: Vec<f32>,
    pub patient_id: Option<String>,
    pub eye: Option<Eye>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    pub num_classes: usize,
    pub records: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn truths(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.truth).collect()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.predicted).collect()
    }
}

/// Writes `sample_path<TAB>truth<TAB>pred<TAB>p0,...,pK-1<TAB>patient_id<TAB>eye`
/// rows, preceded by a `#num_classes=K` line.
pub fn write_predictions(set: &PredictionSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "#num_classes={}", set.num_classes)?;
    for r in &set.records {
        let probs: Vec<String> = r.probabilities.iter().map(|p| format!("{p:.6}")).collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.sample_path,
            r.truth,
            r.predicted,
            probs.join(","),
            r.patient_id.as_deref().unwrap_or(""),
            r.eye.map(Eye::as_str).unwrap_or("")
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<PredictionSet> {
    parse_predictions(&fs::read_to_string(path)?)
}

pub fn parse_predictions(text: &str) -> Result<PredictionSet> {
    let mut num_classes = None;
    let mut records = Vec::new();
    for (idx, row) in text.lines().enumerate() {
        let line = idx + 1;
        let bad = |reason: String| MetricsError::MalformedRow { line, reason };
        if row.trim().is_empty() {
            continue;
        }
        if let Some(k) = row.strip_prefix("#num_classes=") {
            num_classes = Some(k.trim().parse::<usize>().map_err(|e| bad(e.to_string()))?);
            continue;
        }
        if row.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = row.split('\t').collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", f.len())));
        }
        let int = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(format!("`{s}` is not a class index")));
        let probabilities = if f[3].trim().is_empty() {
            Vec::new()
        } else {
            f[3].split(',')
                .map(|p| p.trim().parse::<f32>().map_err(|_| bad(format!("`{p}` is not a probability"))))
                .collect::<Result<_>>()?
        };
        let eye = match f[5].trim() {
            "" => None,
            e => Some(Eye::from_str(e).map_err(bad)?),
        };
        records.push(Prediction {
            sample_path: f[0].to_string(),
            truth: int(f[1])?,
            predicted: int(f[2])?,
            probabilities,
            patient_id: Some(f[4].trim()).filter(|s| !s.is_empty()).map(str::to_string),
            eye,
        });
    }
    let num_classes = match num_classes {
        Some(k) => k,
        None => records.iter().map(|r| r.truth.max(r.predicted) + 1).max().unwrap_or(0),
    };
    Ok(PredictionSet { num_classes, records })
}

/// K x K counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self { counts: vec![vec![0; k]; k] }
    }

    /// Panics unless `counts` is square.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        let k = counts.len();
        assert!(counts.iter().all(|r| r.len() == k), "confusion matrix must be square");
        Self { counts }
    }

    pub fn from_labels(truths: &[usize], preds: &[usize], k: usize) -> Result<Self> {
        let mut cm = Self::zeros(k);
        for (&t, &p) in truths.iter().zip(preds) {
            for label in [t, p] {
                if label >= k {
                    return Err(MetricsError::LabelOutOfRange { label, num_classes: k });
                }
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn transpose(&self) -> Self {
        let k = self.k();
        Self { counts: (0..k).map(|i| (0..k).map(|j| self.counts[j][i]).collect()).collect() }
    }
}

pub fn confusion_matrix(predictions: &PredictionSet, k: usize) -> Result<ConfusionMatrix> {
    ConfusionMatrix::from_labels(&predictions.truths(), &predictions.predictions(), k)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    match cm.total() {
        0 => Err(MetricsError::EmptyMatrix),
        n => Ok(cm.trace() as f64 / n as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinarizationScheme {
    /// Class 0 versus every other class.
    AnyDisease,
    /// Classes 0 and 1 versus class 2 and above.
    Referable,
}

impl BinarizationScheme {
    pub const ALL: [Self; 2] = [Self::AnyDisease, Self::Referable];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::AnyDisease => "any_disease",
            Self::Referable => "referable",
        }
    }

    pub fn is_positive(self, class: usize) -> bool {
        match self {
            Self::AnyDisease => class >= 1,
            Self::Referable => class >= 2,
        }
    }

    pub fn positive_classes(self, k: usize) -> Vec<usize> {
        (0..k).filter(|&c| self.is_positive(c)).collect()
    }
}

impl fmt::Display for BinarizationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BinarizationScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "any_disease" | "any" => Ok(Self::AnyDisease),
            "referable" => Ok(Self::Referable),
            other => Err(format!("unknown binarization scheme `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryConfusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl BinaryConfusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn binarize(cm: &ConfusionMatrix, scheme: BinarizationScheme) -> BinaryConfusion {
    let mut bc = BinaryConfusion { tp: 0, tn: 0, fp: 0, fn_: 0 };
    for (t, row) in cm.counts.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            match (scheme.is_positive(t), scheme.is_positive(p)) {
                (true, true) => bc.tp += n,
                (false, false) => bc.tn += n,
                (false, true) => bc.fp += n,
                (true, false) => bc.fn_ += n,
            }
        }
    }
    bc
}

pub fn sensitivity(bc: &BinaryConfusion) -> Result<f64> {
    match bc.tp + bc.fn_ {
        0 => Err(MetricsError::UndefinedMetric("sensitivity")),
        d => Ok(bc.tp as f64 / d as f64),
    }
}

pub fn specificity(bc: &BinaryConfusion) -> Result<f64> {
    match bc.tn + bc.fp {
        0 => Err(MetricsError::UndefinedMetric("specificity")),
        d => Ok(bc.tn as f64 / d as f64),
    }
}

pub fn binary_accuracy(bc: &BinaryConfusion) -> Result<f64> {
    match bc.total() {
        0 => Err(MetricsError::EmptyMatrix),
        n => Ok((bc.tp + bc.tn) as f64 / n as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaBreakdown {
    pub observed: Vec<Vec<f64>>,
    pub expected: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub kappa: f64,
}

/// Quadratic weighted kappa with weights (i-j)^2/(K-1)^2 and the expected
/// matrix taken from the outer product of the observed marginals.
pub fn quadratic_weighted_kappa(cm: &ConfusionMatrix) -> Result<KappaBreakdown> {
    let k = cm.k();
    if k < 2 {
        return Err(MetricsError::TooFewClasses(k));
    }
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let n = total as f64;
    let observed: Vec<Vec<f64>> = cm.counts.iter().map(|r| r.iter().map(|&c| c as f64 / n).collect()).collect();
    let rows: Vec<f64> = observed.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..k).map(|j| observed.iter().map(|r| r[j]).sum()).collect();
    let expected: Vec<Vec<f64>> = rows.iter().map(|&r| cols.iter().map(|&c| r * c).collect()).collect();
    let denom = ((k - 1) * (k - 1)) as f64;
    let weights: Vec<Vec<f64>> =
        (0..k).map(|i| (0..k).map(|j| (i as f64 - j as f64).powi(2) / denom).collect()).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            num += weights[i][j] * observed[i][j];
            den += weights[i][j] * expected[i][j];
        }
    }
    if den <= 0.0 {
        return Err(MetricsError::DegenerateMarginals);
    }
    Ok(KappaBreakdown { observed, expected, weights, kappa: 1.0 - num / den })
}

/// Agreement band of a kappa value. Exactly 0.20 is Fair; every band is
/// closed at its upper edge.
pub fn kappa_category(kappa: f64) -> &'static str {
    if kappa < 0.20 {
        "Poor"
    } else if kappa <= 0.40 {
        "Fair"
    } else if kappa <= 0.60 {
        "Moderate"
    } else if kappa <= 0.80 {
        "Good"
    } else {
        "Very good"
    }
}

/// Collapses per-eye records to one record per patient, taking the worse
/// (maximum) severity for both truth and prediction. Records are emitted in
/// patient-id order; probabilities are dropped.
pub fn blend_to_patient(predictions: &PredictionSet) -> Result<PredictionSet> {
    let mut patients: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in &predictions.records {
        let pid = r.patient_id.as_deref().ok_or_else(|| MetricsError::MissingPatientId(r.sample_path.clone()))?;
        let e = patients.entry(pid).or_insert((r.truth, r.predicted));
        e.0 = e.0.max(r.truth);
        e.1 = e.1.max(r.predicted);
    }
    let records = patients
        .into_iter()
        .map(|(pid, (truth, predicted))| Prediction {
            sample_path: pid.to_string(),
            truth,
            predicted,
            probabilities: Vec::new(),
            patient_id: Some(pid.to_string()),
            eye: None,
        })
        .collect();
    Ok(PredictionSet { num_classes: predictions.num_classes, records })
}
