use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use retina_bench::dataset::load_manifest;
use retina_bench::imaging::GrahamParams;
use retina_bench::stats::{Alternative, PMethod, TestKind, TestOptions};
use retina_bench_cli::compare::{compare, CompareRequest, Source};
use retina_bench_cli::config::{ExperimentConfig, Overrides};
use retina_bench_cli::error::CliError;
use retina_bench_cli::{grid, prep, report, runner};

#[derive(Parser)]
#[command(name = "retina-bench", version, about = "Transfer-learning benchmark runner for retinal images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate the single configuration a config file describes.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every combination of the config's list-valued axes.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_parallel: Option<usize>,
        /// Only write the planned summary.
        #[arg(long)]
        dry_run: bool,
    },
    /// Render tables and figures from run or grid directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Epoch the tables read: last or best (best validation accuracy).
        #[arg(long, default_value = "last")]
        selector: String,
    },
    /// Compare two groups with a rank test; appends to comparisons.csv.
    Compare {
        #[arg(long, value_enum)]
        test: TestArg,
        /// CSV table holding both columns.
        #[arg(long, requires_all = ["a", "b"], conflicts_with_all = ["a_runs", "b_runs"])]
        table: Option<PathBuf>,
        #[arg(long)]
        a: Option<String>,
        #[arg(long)]
        b: Option<String>,
        #[arg(long, num_args = 1.., requires_all = ["b_runs", "metric"])]
        a_runs: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        b_runs: Vec<PathBuf>,
        /// Metric selector such as validation_loss:last.
        #[arg(long)]
        metric: Option<String>,
        #[arg(long, value_enum, default_value = "auto")]
        method: MethodArg,
        #[arg(long, value_enum, default_value = "two-sided")]
        alternative: AltArg,
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Graham-preprocess every image of a manifest into a cache directory.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the manifest's directory.
        #[arg(long)]
        image_root: Option<PathBuf>,
        /// Take Graham parameters from this experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build a manifest from a directory-per-class layout.
    ImportDirs {
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "imported")]
        task: String,
        /// Class order, comma separated; defaults to sorted directory names.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TestArg {
    Wilcoxon,
    MannWhitney,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Auto,
    Exact,
    Asymptotic,
}

#[derive(Clone, Copy, ValueEnum)]
enum AltArg {
    TwoSided,
    Less,
    Greater,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let exp = ExperimentConfig::load(&config, &Overrides { output_dir: out, seed, max_parallel: None })?;
            let doc = runner::run_command(&exp)?;
            println!("{} {}", doc.run_id, exp.output_dir.display());
        }
        Command::Grid { config, out, seed, max_parallel, dry_run } => {
            let exp = ExperimentConfig::load(&config, &Overrides { output_dir: out, seed, max_parallel })?;
            let outcome = grid::run_grid(&exp, dry_run)?;
            println!("{} runs, summary in {}", outcome.rows.len(), outcome.summary_path.display());
            if outcome.failed() > 0 {
                return Err(CliError::GridFailures { failed: outcome.failed(), total: outcome.rows.len() });
            }
        }
        Command::Report { runs, out, selector } => {
            let selector = selector.parse().map_err(CliError::MissingMetric)?;
            let loaded = report::discover_runs(&runs)?;
            let files = report::report(&loaded, &out, selector)?;
            println!("{} runs, {} files in {}", loaded.len(), files.len(), out.display());
        }
        Command::Compare { test, table, a, b, a_runs, b_runs, metric, method, alternative, label, out } => {
            let source = match (table, metric) {
                (Some(path), _) => Source::Table { path, a: a.unwrap_or_default(), b: b.unwrap_or_default() },
                (None, Some(m)) => Source::Runs { a: a_runs, b: b_runs, metric: m.parse()? },
                (None, None) => return Err(CliError::MissingMetric("give --table or --a-runs/--b-runs with --metric".into())),
            };
            let options = TestOptions {
                method: match method {
                    MethodArg::Auto => PMethod::Auto,
                    MethodArg::Exact => PMethod::Exact,
                    MethodArg::Asymptotic => PMethod::Asymptotic,
                },
                alternative: match alternative {
                    AltArg::TwoSided => Alternative::TwoSided,
                    AltArg::Less => Alternative::Less,
                    AltArg::Greater => Alternative::Greater,
                },
            };
            let test = match test {
                TestArg::Wilcoxon => TestKind::WilcoxonSignedRank,
                TestArg::MannWhitney => TestKind::MannWhitneyU,
            };
            let r = compare(&CompareRequest { source, test, options, label }, &out)?;
            println!("{} statistic={} p={:.6} significant={}", r.test.as_str(), r.statistic, r.p_value, r.significant);
        }
        Command::Preprocess { manifest, out, image_root, config } => {
            let params = match config {
                Some(c) => ExperimentConfig::load(&c, &Overrides { output_dir: Some(out.clone()), ..Default::default() })?
                    .preprocess
                    .unwrap_or_default(),
                None => GrahamParams::default(),
            };
            let root = image_root.unwrap_or_else(|| manifest.parent().map(PathBuf::from).unwrap_or_default());
            let m = prep::preprocess_manifest(&load_manifest(&manifest)?, &root, &out, &params)?;
            println!("{} images preprocessed into {}", m.samples().len(), out.display());
        }
        Command::ImportDirs { root, out, task, classes } => {
            let m = prep::import_dirs(&root, &task, classes.as_deref(), &out)?;
            println!("{} samples, {} classes written to {}", m.samples().len(), m.num_classes(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
