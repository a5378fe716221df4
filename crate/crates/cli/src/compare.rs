//! Rank-based comparisons between two groups of numbers, appended to
//! `comparisons.csv`.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use retina_bench::stats::{mann_whitney_u_with, wilcoxon_signed_rank_with, ComparisonResult, TestKind, TestOptions};

use crate::error::{CliError, Result};
use crate::report::discover_runs;
use crate::select::MetricSelector;

#[derive(Debug, Clone)]
pub enum Source {
    /// Two named columns of a CSV table with a header row.
    Table { path: PathBuf, a: String, b: String },
    /// One metric read from two groups of run directories. Groups are
    /// paired in discovery order (registry position, then seed).
    Runs { a: Vec<PathBuf>, b: Vec<PathBuf>, metric: MetricSelector },
}

#[derive(Debug, Clone)]
pub struct CompareRequest {
    pub source: Source,
    pub test: TestKind,
    pub options: TestOptions,
    pub label: Option<String>,
}

/// Reads one numeric column of a CSV table. Blank cells are skipped.
pub fn read_table_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let idx = r
        .headers()?
        .iter()
        .position(|h| h.trim() == column)
        .ok_or_else(|| CliError::MissingMetric(format!("column `{column}` not in {}", path.display())))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let cell = rec.get(idx).unwrap_or("").trim();
        if cell.is_empty() {
            continue;
        }
        let v: f64 = cell
            .parse()
            .map_err(|_| CliError::MissingMetric(format!("`{column}` row {}: `{cell}` is not a number", i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

fn describe(source: &Source) -> (String, String) {
    match source {
        Source::Table { path, a, b } => {
            let f = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            (format!("{f}:{a}"), format!("{f}:{b}"))
        }
        Source::Runs { a, b, metric } => (format!("{metric} over {} dirs", a.len()), format!("{metric} over {} dirs", b.len())),
    }
}

pub fn resolve_values(source: &Source) -> Result<(Vec<f64>, Vec<f64>)> {
    match source {
        Source::Table { path, a, b } => Ok((read_table_column(path, a)?, read_table_column(path, b)?)),
        Source::Runs { a, b, metric } => {
            let values = |dirs: &[PathBuf]| -> Result<Vec<f64>> {
                discover_runs(dirs)?.iter().map(|r| metric.value(&r.doc)).collect()
            };
            Ok((values(a)?, values(b)?))
        }
    }
}

/// Runs the test and appends a row to `<out_dir>/comparisons.csv`.
pub fn compare(req: &CompareRequest, out_dir: &Path) -> Result<ComparisonResult> {
    let (a, b) = resolve_values(&req.source)?;
    let result = match req.test {
        TestKind::WilcoxonSignedRank => wilcoxon_signed_rank_with(&a, &b, req.options)?,
        TestKind::MannWhitneyU => mann_whitney_u_with(&a, &b, req.options)?,
    };
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("comparisons.csv");
    let fresh = !path.exists();
    let file = OpenOptions::new().create(true).append(true).open(&path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(["label", "test", "a", "b", "n_a", "n_b", "statistic", "p_value", "method", "alternative", "significant"])?;
    }
    let (da, db) = describe(&req.source);
    w.write_record([
        req.label.clone().unwrap_or_default(),
        result.test.as_str().to_string(),
        da,
        db,
        result.n_a.to_string(),
        result.n_b.to_string(),
        format!("{}", result.statistic),
        format!("{:.6}", result.p_value),
        serde_json::to_value(result.method)?.as_str().unwrap_or_default().to_string(),
        serde_json::to_value(result.alternative)?.as_str().unwrap_or_default().to_string(),
        result.significant.to_string(),
    ])?;
    w.flush()?;
    Ok(result)
}
