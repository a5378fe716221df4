//! Grid execution: every combination of the config's axes, isolated runs,
//! one summary row per planned run.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use retina_bench::dataset::Split;
use retina_bench::train::Phase;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RunConfig};
use crate::error::{CliError, Result};
use crate::runner::{execute_run, manifest_digest, prepare_data, Level, RunDocument};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Planned,
    Ok,
    Failed,
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub architecture: String,
    pub pretrained: bool,
    pub mode: String,
    pub learning_rate: f64,
    pub seed: u64,
    pub status: RunStatus,
    pub best_validation_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    pub final_train_loss: Option<f64>,
    pub final_validation_loss: Option<f64>,
    pub final_validation_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_kappa: Option<f64>,
    pub run_dir: String,
    pub error: String,
}

impl SummaryRow {
    fn planned(cfg: &RunConfig, dir: &Path) -> Self {
        Self {
            run_id: cfg.run_id(),
            architecture: cfg.architecture.clone(),
            pretrained: cfg.pretrained,
            mode: cfg.mode.as_str().to_string(),
            learning_rate: cfg.train.learning_rate,
            seed: cfg.train.seed,
            status: RunStatus::Planned,
            best_validation_accuracy: None,
            best_epoch: None,
            final_train_loss: None,
            final_validation_loss: None,
            final_validation_accuracy: None,
            test_accuracy: None,
            test_kappa: None,
            run_dir: dir.display().to_string(),
            error: String::new(),
        }
    }

    fn complete(&mut self, doc: &RunDocument) {
        let r = &doc.record;
        self.status = RunStatus::Ok;
        self.best_validation_accuracy = Some(r.best_validation_accuracy);
        self.best_epoch = Some(r.best_epoch);
        self.final_train_loss = r.last(Phase::Train).map(|e| e.loss);
        self.final_validation_loss = r.last(Phase::Validation).map(|e| e.loss);
        self.final_validation_accuracy = r.last(Phase::Validation).map(|e| e.accuracy);
        let test = doc.evaluation(Split::Test, Level::Eye);
        self.test_accuracy = test.map(|e| e.accuracy);
        self.test_kappa = test.and_then(|e| e.kappa);
    }
}

pub fn run_dir(output_dir: &Path, run_id: &str) -> PathBuf {
    output_dir.join("runs").join(run_id)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    let mut w = csv::Writer::from_path(&tmp)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    drop(w);
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub struct GridOutcome {
    pub summary_path: PathBuf,
    pub rows: Vec<SummaryRow>,
}

impl GridOutcome {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.status == RunStatus::Failed).count()
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// Expands the grid, writes the planned summary, then (unless `dry_run`)
/// executes the runs on `max_parallel` workers. A failed run is recorded
/// and the rest continue.
pub fn run_grid(exp: &ExperimentConfig, dry_run: bool) -> Result<GridOutcome> {
    let digest = manifest_digest(exp)?;
    let plan = exp.expand(&digest);
    std::fs::create_dir_all(&exp.output_dir)?;
    let summary_path = exp.output_dir.join("summary.csv");
    let rows: Vec<SummaryRow> =
        plan.iter().map(|c| SummaryRow::planned(c, &run_dir(&exp.output_dir, &c.run_id()))).collect();
    write_summary(&summary_path, &rows)?;
    log::info!("grid of {} runs planned in {}", rows.len(), summary_path.display());
    if dry_run {
        return Ok(GridOutcome { summary_path, rows });
    }

    let data = match prepare_data(exp) {
        Ok(d) => d,
        Err(e) => {
            // nothing can run; record the cause on every row
            let rows: Vec<SummaryRow> = rows
                .into_iter()
                .map(|mut r| {
                    r.status = RunStatus::Failed;
                    r.error = e.to_string();
                    r
                })
                .collect();
            write_summary(&summary_path, &rows)?;
            return Err(e);
        }
    };

    let rows = Mutex::new(rows);
    let next = AtomicUsize::new(0);
    let workers = exp.max_parallel.min(plan.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = plan.get(i) else { break };
                let id = cfg.run_id();
                let dir = run_dir(&exp.output_dir, &id);
                let result = catch_unwind(AssertUnwindSafe(|| execute_run(cfg, &data, &dir)))
                    .unwrap_or_else(|p| Err(CliError::Panicked(panic_message(p)).in_run(&id)));
                let mut rows = rows.lock().expect("summary lock");
                match &result {
                    Ok(doc) => rows[i].complete(doc),
                    Err(e) => {
                        log::warn!("{e}");
                        rows[i].status = RunStatus::Failed;
                        rows[i].error = e.to_string();
                    }
                }
                if let Err(e) = write_summary(&summary_path, &rows) {
                    log::error!("cannot update {}: {e}", summary_path.display());
                }
            });
        }
    });
    let rows = rows.into_inner().expect("summary lock");
    write_summary(&summary_path, &rows)?;
    Ok(GridOutcome { summary_path, rows })
}
