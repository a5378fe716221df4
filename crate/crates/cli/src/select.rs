//! Metric selectors shared by `report` and `compare`, e.g.
//! `validation_loss:last` or `train_accuracy:best`.

use std::fmt;
use std::str::FromStr;

use retina_bench::dataset::Split;
use retina_bench::stats::train_val_ratio;
use retina_bench::train::{Phase, RunRecord};

use crate::error::{CliError, Result};
use crate::runner::{Level, RunDocument};

/// Which epoch a per-epoch metric is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Selector {
    #[default]
    Last,
    /// The epoch with the best validation accuracy.
    Best,
}

impl FromStr for Selector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "last" => Ok(Self::Last),
            "best" => Ok(Self::Best),
            _ => Err(format!("unknown epoch selector `{s}` (expected last or best)")),
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Last => "last",
            Self::Best => "best",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    TrainLoss,
    TrainAccuracy,
    ValidationLoss,
    ValidationAccuracy,
    /// Mean per-epoch train:validation loss ratio.
    LossRatio,
    TestAccuracy,
    TestKappa,
}

const METRICS: [(Metric, &str); 7] = [
    (Metric::TrainLoss, "train_loss"),
    (Metric::TrainAccuracy, "train_accuracy"),
    (Metric::ValidationLoss, "validation_loss"),
    (Metric::ValidationAccuracy, "validation_accuracy"),
    (Metric::LossRatio, "loss_ratio"),
    (Metric::TestAccuracy, "test_accuracy"),
    (Metric::TestKappa, "test_kappa"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricSelector {
    pub metric: Metric,
    pub selector: Selector,
}

impl FromStr for MetricSelector {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let (name, sel) = s.split_once(':').unwrap_or((s, "last"));
        let name = name.replace("val_", "validation_");
        let metric = METRICS
            .iter()
            .find(|(_, n)| *n == name)
            .map(|(m, _)| *m)
            .ok_or_else(|| CliError::MissingMetric(format!("unknown metric `{s}`")))?;
        let selector = sel.parse().map_err(CliError::MissingMetric)?;
        Ok(Self { metric, selector })
    }
}

impl fmt::Display for MetricSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = METRICS.iter().find(|(m, _)| *m == self.metric).map(|(_, n)| *n).unwrap_or("?");
        write!(f, "{name}:{}", self.selector)
    }
}

/// The epoch index `selector` points at.
pub fn selected_epoch(record: &RunRecord, selector: Selector) -> Option<usize> {
    match selector {
        Selector::Last => record.last(Phase::Train).map(|r| r.epoch),
        Selector::Best => record.records.iter().any(|r| r.epoch == record.best_epoch).then_some(record.best_epoch),
    }
}

/// Loss or accuracy of `phase` at the selected epoch.
pub fn epoch_value(record: &RunRecord, phase: Phase, selector: Selector, loss: bool) -> Option<f64> {
    let epoch = selected_epoch(record, selector)?;
    record
        .phase(phase)
        .find(|r| r.epoch == epoch)
        .map(|r| if loss { r.loss } else { r.accuracy })
}

impl MetricSelector {
    pub fn value(&self, doc: &RunDocument) -> Result<f64> {
        let missing = || CliError::MissingMetric(format!("{self} in run {}", doc.run_id));
        let r = &doc.record;
        let v = match self.metric {
            Metric::TrainLoss => epoch_value(r, Phase::Train, self.selector, true),
            Metric::TrainAccuracy => epoch_value(r, Phase::Train, self.selector, false),
            Metric::ValidationLoss => epoch_value(r, Phase::Validation, self.selector, true),
            Metric::ValidationAccuracy => epoch_value(r, Phase::Validation, self.selector, false),
            Metric::LossRatio => train_val_ratio(r).ok().map(|s| s.mean),
            Metric::TestAccuracy => doc.evaluation(Split::Test, Level::Eye).map(|e| e.accuracy),
            Metric::TestKappa => doc.evaluation(Split::Test, Level::Eye).and_then(|e| e.kappa),
        };
        v.ok_or_else(missing)
    }
}
