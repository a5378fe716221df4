//! Report rendering from finished run directories: per-network CSV
//! tables, boxplots, ratio plots and per-run curves and heatmaps. Every
//! number comes from `run.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use retina_bench::dataset::Split;
use retina_bench::stats::{summarize, train_val_ratio};
use retina_bench::train::Phase;
use retina_bench::zoo::{list_architectures, TransferMode};

use crate::config::group_key;
use crate::error::{CliError, Result};
use crate::plots;
use crate::runner::{render_run_plots, Level, RunDocument};
use crate::select::{epoch_value, Selector};

/// Table columns: pretrained-ness, phase and mode, in report order.
pub const COLUMNS: [&str; 8] =
    ["np_train_ft", "np_train_fe", "np_val_ft", "np_val_fe", "p_train_ft", "p_train_fe", "p_val_ft", "p_val_fe"];
pub const GROUPS: [&str; 4] = ["np_ft", "np_fe", "p_ft", "p_fe"];

pub struct LoadedRun {
    pub dir: PathBuf,
    pub doc: RunDocument,
}

fn arch_rank(name: &str) -> usize {
    list_architectures().iter().position(|a| a.name == name).unwrap_or(usize::MAX)
}

/// Accepts run directories, grid output directories (with `runs/`), or
/// directories whose children are runs. Results are ordered by registry
/// position, group, learning rate and seed.
pub fn discover_runs(paths: &[PathBuf]) -> Result<Vec<LoadedRun>> {
    let mut runs = Vec::new();
    for p in paths {
        if p.join("run.json").is_file() {
            runs.push(LoadedRun { dir: p.clone(), doc: RunDocument::load(p)? });
            continue;
        }
        let parent = if p.join("runs").is_dir() { p.join("runs") } else { p.clone() };
        let mut found = false;
        if parent.is_dir() {
            let mut dirs: Vec<PathBuf> =
                fs::read_dir(&parent)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|d| d.join("run.json").is_file()).collect();
            dirs.sort();
            for d in dirs {
                runs.push(LoadedRun { doc: RunDocument::load(&d)?, dir: d });
                found = true;
            }
        }
        if !found {
            return Err(CliError::MissingArtifacts(p.join("run.json")));
        }
    }
    runs.sort_by(|a, b| {
        let key = |r: &LoadedRun| (arch_rank(&r.doc.config.architecture), r.doc.config.group(), r.doc.config.train.seed);
        key(a)
            .cmp(&key(b))
            .then(a.doc.config.train.learning_rate.total_cmp(&b.doc.config.train.learning_rate))
            .then(a.doc.run_id.cmp(&b.doc.run_id))
    });
    Ok(runs)
}

fn column_parts(col: &str) -> (bool, Phase, TransferMode) {
    let mut it = col.split('_');
    let pretrained = it.next() == Some("p");
    let phase = if it.next() == Some("train") { Phase::Train } else { Phase::Validation };
    let mode = if it.next() == Some("ft") { TransferMode::FineTune } else { TransferMode::FeatureExtract };
    (pretrained, phase, mode)
}

/// Per-run value of a loss/accuracy table column, if the run belongs to it.
pub fn column_value(doc: &RunDocument, column: &str, loss: bool, selector: Selector) -> Option<f64> {
    let (pretrained, phase, mode) = column_parts(column);
    if doc.config.pretrained != pretrained || doc.config.mode != mode {
        return None;
    }
    epoch_value(&doc.record, phase, selector, loss)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Networks present in `runs`, in registry order.
pub fn networks(runs: &[LoadedRun]) -> Vec<String> {
    let mut names: Vec<String> = runs.iter().map(|r| r.doc.config.architecture.clone()).collect();
    names.sort_by_key(|n| arch_rank(n));
    names.dedup();
    names
}

/// Network-by-column table; a cell averages all runs that fall into it.
fn network_table(
    runs: &[LoadedRun],
    columns: &[&str],
    cell: impl Fn(&RunDocument, &str) -> Option<f64>,
    fmt: impl Fn(f64) -> String,
) -> String {
    let mut out = format!("network,{}\n", columns.join(","));
    for net in networks(runs) {
        out.push_str(&net);
        for col in columns {
            let vals: Vec<f64> =
                runs.iter().filter(|r| r.doc.config.architecture == net).filter_map(|r| cell(&r.doc, col)).collect();
            let _ = write!(out, ",{}", mean(&vals).map(&fmt).unwrap_or_default());
        }
        out.push('\n');
    }
    out
}

fn in_group(doc: &RunDocument, group: &str) -> bool {
    group_key(doc.config.pretrained, doc.config.mode) == group
}

pub fn loss_table(runs: &[LoadedRun], selector: Selector) -> String {
    network_table(runs, &COLUMNS, |d, c| column_value(d, c, true, selector), |v| format!("{v:.4}"))
}

pub fn accuracy_table(runs: &[LoadedRun], selector: Selector) -> String {
    network_table(runs, &COLUMNS, |d, c| column_value(d, c, false, selector), |v| format!("{v:.4}"))
}

/// `mean (std)` of the per-epoch ratios of every run in the cell.
pub fn ratio_cell(runs: &[LoadedRun], network: &str, group: &str) -> Option<(f64, f64)> {
    let ratios: Vec<f64> = runs
        .iter()
        .filter(|r| r.doc.config.architecture == network && in_group(&r.doc, group))
        .filter_map(|r| train_val_ratio(&r.doc.record).ok())
        .flat_map(|s| s.per_epoch_ratios)
        .collect();
    summarize(&ratios).ok().map(|s| (s.mean, s.std))
}

pub fn ratio_table(runs: &[LoadedRun]) -> String {
    let mut out = format!("network,{}\n", GROUPS.join(","));
    for net in networks(runs) {
        out.push_str(&net);
        for g in GROUPS {
            let cell = ratio_cell(runs, &net, g).map(|(m, s)| format!("{m:.3} ({s:.3})")).unwrap_or_default();
            let _ = write!(out, ",{cell}");
        }
        out.push('\n');
    }
    out
}

fn test_table(runs: &[LoadedRun], value: impl Fn(&RunDocument) -> Option<f64>) -> String {
    network_table(runs, &GROUPS, |d, g| if in_group(d, g) { value(d) } else { None }, |v| format!("{v:.4}"))
}

pub fn sens_spec_table(runs: &[LoadedRun]) -> String {
    let mut out = String::from("network,group,seed,level,scheme,sensitivity,specificity\n");
    for r in runs {
        for e in r.doc.evaluations.iter().filter(|e| e.split == Split::Test) {
            for b in &e.binary {
                let f = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    r.doc.config.architecture,
                    r.doc.config.group(),
                    r.doc.config.train.seed,
                    e.level.as_str(),
                    b.scheme,
                    f(b.sensitivity),
                    f(b.specificity)
                );
            }
        }
    }
    out
}

/// Boxplot data: one group per table column that has at least one run.
pub fn boxplot_groups(runs: &[LoadedRun], loss: bool, selector: Selector) -> Vec<(String, Vec<f64>)> {
    COLUMNS
        .iter()
        .map(|c| (c.to_string(), runs.iter().filter_map(|r| column_value(&r.doc, c, loss, selector)).collect::<Vec<_>>()))
        .filter(|(_, v)| !v.is_empty())
        .collect()
}

/// Renders everything into `out` and returns the written paths.
pub fn report(runs: &[LoadedRun], out: &Path, selector: Selector) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(CliError::MissingArtifacts(out.to_path_buf()));
    }
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    put("loss.csv", loss_table(runs, selector))?;
    put("accuracy.csv", accuracy_table(runs, selector))?;
    put("ratio.csv", ratio_table(runs))?;
    put(
        "test_accuracy.csv",
        test_table(runs, |d| d.evaluation(Split::Test, Level::Eye).map(|e| e.accuracy)),
    )?;
    put("kappa.csv", test_table(runs, |d| d.evaluation(Split::Test, Level::Eye).and_then(|e| e.kappa)))?;
    put("sens_spec.csv", sens_spec_table(runs))?;
    let mut index = String::from("run_id,network,group,learning_rate,seed,best_epoch,best_validation_accuracy,dir\n");
    for r in runs {
        let c = &r.doc.config;
        let _ = writeln!(
            index,
            "{},{},{},{},{},{},{:.4},{}",
            r.doc.run_id,
            c.architecture,
            c.group(),
            c.train.learning_rate,
            c.train.seed,
            r.doc.record.best_epoch,
            r.doc.record.best_validation_accuracy,
            r.dir.display()
        );
    }
    put("runs.csv", index)?;

    for r in runs {
        let dir = out.join("runs").join(&r.doc.run_id);
        fs::create_dir_all(&dir)?;
        written.extend(render_run_plots(&r.doc, &dir)?);
    }
    for (loss, name, desc) in [(true, "boxplot_loss.png", "loss"), (false, "boxplot_accuracy.png", "accuracy")] {
        let p = out.join(name);
        plots::boxplot(&p, &format!("{desc} by group ({selector} epoch)"), desc, &boxplot_groups(runs, loss, selector))?;
        written.push(p);
    }
    let nets = networks(runs);
    let series: Vec<(String, Vec<Option<(f64, f64)>>)> = GROUPS
        .iter()
        .map(|g| (g.to_string(), nets.iter().map(|n| ratio_cell(runs, n, g)).collect::<Vec<_>>()))
        .filter(|(_, v)| v.iter().any(Option::is_some))
        .collect();
    let p = out.join("ratio_plot.png");
    plots::ratio_plot(&p, "train:validation loss ratio", &nets, &series)?;
    written.push(p);
    Ok(written)
}
