//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{comparison_rows, mann_whitney_enumeration, wilcoxon_enumeration, ResultsTable};
use image::{ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retina_bench::dataset::{class_distribution, DatasetManifest, Eye, SampleRecord, Split};
use retina_bench::imaging::{estimate_fundus_radius, graham_preprocess, GrahamParams, Rgb32FImage, TransformSpec};
use retina_bench::metrics::{
    blend_to_patient, kappa_category, quadratic_weighted_kappa, sensitivity, specificity, BinaryConfusion,
    ConfusionMatrix, Prediction, PredictionSet,
};
use retina_bench::stats::{
    mann_whitney_u, mann_whitney_u_with, wilcoxon_signed_rank, wilcoxon_signed_rank_with, PMethod, TestOptions,
};
use retina_bench::synthetic::{write_synthetic_corpus, SyntheticSpec};
use retina_bench::train::{
    backbone_snapshot, lr_at_epoch, train, CheckpointPolicy, ImageLoader, Phase, SplitData, TrainConfig,
};
use retina_bench::zoo::{build_model, TransferMode};
use retina_bench_cli::grid::{read_summary, RunStatus};

const BIN: &str = env!("CARGO_BIN_EXE_retina-bench");

type Outcome = Result<String, String>;

fn check(ok: bool, detail: impl Into<String>) -> Outcome {
    if ok {
        Ok(detail.into())
    } else {
        Err(detail.into())
    }
}

fn criterion_1() -> Outcome {
    let bc = BinaryConfusion { tp: 6311, tn: 37306, fp: 2227, fn_: 7732 };
    let sens = 100.0 * sensitivity(&bc).map_err(|e| e.to_string())?;
    let spec = 100.0 * specificity(&bc).map_err(|e| e.to_string())?;
    check(
        (sens - 44.9).abs() <= 0.05 && (spec - 94.4).abs() <= 0.05,
        format!("sensitivity {sens:.3}%, specificity {spec:.3}%"),
    )
}

fn criterion_2() -> Outcome {
    let text = fs::read_to_string(common::fixture("class_distributions.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<String>> = text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    let (mut checked, mut worst) = (0, 0.0f64);
    for task in ["dr", "oct"] {
        for split in [Split::Train, Split::Validation, Split::Test] {
            let group: Vec<&Vec<String>> =
                rows.iter().filter(|r| r[0] == task && r[1].parse::<Split>().ok() == Some(split)).collect();
            let counts: Vec<usize> = group.iter().map(|r| r[3].parse().unwrap()).collect();
            let names = (0..counts.len()).map(|c| format!("class{c}")).collect();
            let samples = counts
                .iter()
                .enumerate()
                .flat_map(|(label, &n)| (0..n).map(move |i| SampleRecord::new(format!("{label}/{i}.png"), label, split)))
                .collect();
            let m = DatasetManifest::new(task, names, samples).map_err(|e| e.to_string())?;
            let d = class_distribution(&m, split).map_err(|e| e.to_string())?;
            for (pct, row) in d.percentages().iter().zip(&group) {
                let published: f64 = row[4].parse().unwrap();
                worst = worst.max((pct - published).abs());
                checked += 1;
            }
        }
    }
    check(checked == 27 && worst <= 0.1, format!("{checked} percentages, max deviation {worst:.3} points"))
}

fn criterion_3() -> Outcome {
    let loss = ResultsTable::load("dr_loss_results.csv");
    let acc = ResultsTable::load("dr_acc_results.csv");
    let (mut wilcoxon, mut mann_whitney, mut mismatches) = (0, 0, Vec::new());
    for row in comparison_rows() {
        for (table, published) in [(&loss, row.loss_p), (&acc, row.accuracy_p)] {
            let (a, b) = (table.column(&row.column_a), table.column(&row.column_b));
            let r = if row.test == "wilcoxon_signed_rank" {
                wilcoxon += 1;
                wilcoxon_signed_rank(a, b)
            } else {
                mann_whitney += 1;
                mann_whitney_u(a, b)
            }
            .map_err(|e| e.to_string())?;
            if r.significant != published.significant() {
                mismatches.push(row.test_no);
            }
        }
    }
    let first = wilcoxon_signed_rank(loss.column("np_train_ft"), loss.column("p_train_ft")).map_err(|e| e.to_string())?;
    check(
        wilcoxon + mann_whitney == 24 && mann_whitney == 8 && mismatches.is_empty() && (first.p_value - 0.002).abs() <= 0.005,
        format!(
            "{} flags ({wilcoxon} Wilcoxon, {mann_whitney} Mann-Whitney), mismatches {mismatches:?}; test 1 loss p={:.5} ({:?})",
            wilcoxon + mann_whitney,
            first.p_value, first.method
        ),
    )
}

fn random_counts(rng: &mut ChaCha8Rng) -> Vec<Vec<u64>> {
    let k = rng.random_range(2..=6);
    let max = rng.random_range(1..40);
    (0..k).map(|_| (0..k).map(|_| rng.random_range(0..=max)).collect()).collect()
}

/// kappa = 1 - sum(W*O) / sum(W*E) from the normalized observed matrix O,
/// the marginal outer product E and quadratic weights W.
fn kappa_oracle(counts: &[Vec<u64>]) -> Option<f64> {
    let k = counts.len();
    let n: f64 = counts.iter().flatten().map(|&c| c as f64).sum();
    let o: Vec<Vec<f64>> = counts.iter().map(|r| r.iter().map(|&c| c as f64 / n).collect()).collect();
    let rows: Vec<f64> = o.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..k).map(|j| o.iter().map(|r| r[j]).sum()).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64) / (k - 1) as f64).powi(2);
            num += w * o[i][j];
            den += w * rows[i] * cols[j];
        }
    }
    (den > 0.0).then(|| 1.0 - num / den)
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for k in 2..=6 {
        for _ in 0..20 {
            let diag = (0..k).map(|i| (0..k).map(|j| if i == j { rng.random_range(1..50) } else { 0 }).collect()).collect();
            let kappa = quadratic_weighted_kappa(&ConfusionMatrix::from_counts(diag)).map_err(|e| e.to_string())?.kappa;
            if (kappa - 1.0).abs() > 1e-12 {
                return Err(format!("diagonal {k}x{k} gave {kappa}"));
            }
        }
    }
    let (mut symmetric, mut oracle, mut worst) = (0, 0, 0.0f64);
    while symmetric < 1000 {
        let counts = random_counts(&mut rng);
        let cm = ConfusionMatrix::from_counts(counts);
        let Ok(b) = quadratic_weighted_kappa(&cm) else { continue };
        let t = quadratic_weighted_kappa(&cm.transpose()).map_err(|e| e.to_string())?;
        if (b.kappa - t.kappa).abs() > 1e-9 || !(-1.0..=1.0).contains(&b.kappa) {
            return Err(format!("symmetry or range violated: {} vs {}", b.kappa, t.kappa));
        }
        symmetric += 1;
    }
    while oracle < 1000 {
        let counts = random_counts(&mut rng);
        let Some(expected) = kappa_oracle(&counts) else { continue };
        let got = quadratic_weighted_kappa(&ConfusionMatrix::from_counts(counts)).map_err(|e| e.to_string())?.kappa;
        worst = worst.max((got - expected).abs());
        oracle += 1;
    }
    let (moderate, poor) = (kappa_category(0.56), kappa_category(0.005));
    check(
        worst <= 1e-9 && moderate == "Moderate" && poor == "Poor",
        format!("{symmetric} symmetry/range cases, {oracle} oracle cases (max error {worst:.1e}); 0.56 -> {moderate}, 0.005 -> {poor}"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let exact = TestOptions { method: PMethod::Exact, ..Default::default() };
    let mut fixtures: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    // leading slices of the published columns
    let loss = ResultsTable::load("dr_loss_results.csv");
    for n in 5..=10 {
        fixtures.push((loss.column("np_train_ft")[..n].to_vec(), loss.column("p_train_ft")[..n].to_vec()));
        fixtures.push((loss.column("np_val_fe")[..n].to_vec(), loss.column("p_val_fe")[..n].to_vec()));
    }
    // coarse values make ties and zero differences common
    for _ in 0..300 {
        let n = rng.random_range(2..=10);
        let a = (0..n).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
        let b = (0..n).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
        fixtures.push((a, b));
    }
    let (mut wilcoxon, mut mann_whitney, mut worst) = (0, 0, 0.0f64);
    for (a, b) in &fixtures {
        if let Ok(r) = wilcoxon_signed_rank_with(a, b, exact) {
            worst = worst.max((r.p_value - wilcoxon_enumeration(a, b)).abs());
            wilcoxon += 1;
        }
        // unpaired groups with at most ten pooled values
        let nb = (10 - a.len()).clamp(1, b.len());
        let r = mann_whitney_u_with(a, &b[..nb], exact).map_err(|e| e.to_string())?;
        worst = worst.max((r.p_value - mann_whitney_enumeration(a, &b[..nb])).abs());
        mann_whitney += 1;
    }
    check(
        worst <= 1e-12 && wilcoxon > 250,
        format!("{wilcoxon} Wilcoxon and {mann_whitney} Mann-Whitney fixtures, max deviation {worst:.1e}"),
    )
}

fn disk(w: u32, h: u32, radius: f64, color: [f32; 3]) -> Rgb32FImage {
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    ImageBuffer::from_fn(w, h, |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        if dx * dx + dy * dy <= radius * radius {
            Rgb(color)
        } else {
            Rgb([0.0; 3])
        }
    })
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut radius_error = 0.0f64;
    for _ in 0..10 {
        let (w, h) = (rng.random_range(300..1200), rng.random_range(300..1200));
        let r = rng.random_range(60.0..(w.min(h) as f64 / 2.0 - 2.0));
        let est = estimate_fundus_radius(&disk(w, h, r, [0.7, 0.4, 0.2])).map_err(|e| e.to_string())?;
        radius_error = radius_error.max((est as f64 - r).abs());
    }
    let params = GrahamParams::default();
    let out = graham_preprocess(&disk(1100, 1000, 380.0, [0.7, 0.45, 0.2]), &params).map_err(|e| e.to_string())?;
    let expected_edge = (2.0 * 0.9 * 500.0f64).round() as u32;
    // interior: pixels whose truncated blur kernel lies wholly inside the disk
    let c = out.width() as f64 / 2.0;
    let inner = params.target_radius as f64 - (3.0 * params.blur_sigma() as f64).ceil();
    let mut gray_error = 0.0f64;
    for (x, y, p) in out.enumerate_pixels() {
        let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
        if dx * dx + dy * dy <= inner * inner {
            gray_error = p.0.iter().fold(gray_error, |m, &v| m.max((v as f64 - 0.5).abs()));
        }
    }
    check(
        radius_error <= 2.0 && out.dimensions() == (expected_edge, expected_edge) && gray_error <= 0.01,
        format!(
            "max radius error {radius_error:.2} px; output {}x{} (expected {expected_edge}); interior (r <= {inner} px) max |v-0.5| {gray_error:.4}",
            out.width(),
            out.height()
        ),
    )
}

fn criterion_7() -> Outcome {
    let defaults = TrainConfig::default();
    let schedule = [lr_at_epoch(&defaults, 0), lr_at_epoch(&defaults, 7), lr_at_epoch(&defaults, 14)];
    if schedule != [0.001, 0.0001, 0.00001] {
        return Err(format!("lr schedule {schedule:?}"));
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SyntheticSpec { per_class: 100, validation_fraction: 0.1, test_fraction: 0.7, ..Default::default() };
    let m = write_synthetic_corpus(dir.path(), &spec).map_err(|e| e.to_string())?;
    let loader = ImageLoader::cached(dir.path());
    let (train_samples, val_samples) = (m.split_samples(Split::Train), m.split_samples(Split::Validation));
    let data = |split, samples, spec| SplitData { split, samples, num_classes: 3, spec, loader: &loader };
    let train_set = data(Split::Train, &train_samples, TransformSpec::train(224));
    let val_set = data(Split::Validation, &val_samples, TransformSpec::eval(256, 224));

    let mut decreasing = 0;
    let mut frozen = true;
    let mut losses = Vec::new();
    for seed in 0..10 {
        let cfg = TrainConfig { epochs: 3, batch_size: 64, learning_rate: 0.5, seed, ..Default::default() };
        let mut h = build_model("AlexNet", 3, false, TransferMode::FeatureExtract, seed).map_err(|e| e.to_string())?;
        let before = backbone_snapshot(&h).map_err(|e| e.to_string())?;
        let run = train(&mut h, &train_set, &val_set, &cfg, &CheckpointPolicy::default()).map_err(|e| e.to_string())?;
        frozen &= backbone_snapshot(&h).map_err(|e| e.to_string())? == before;
        let train_losses: Vec<f64> = run.phase(Phase::Train).map(|r| r.loss).collect();
        if train_losses[2] < train_losses[0] {
            decreasing += 1;
        }
        losses.push(format!("{:.3}->{:.3}", train_losses[0], train_losses[2]));
    }

    let cfg = TrainConfig { epochs: 3, batch_size: 16, ..Default::default() };
    let mut h = build_model("AlexNet", 3, false, TransferMode::FineTune, 0).map_err(|e| e.to_string())?;
    let before = backbone_snapshot(&h).map_err(|e| e.to_string())?;
    train(&mut h, &train_set, &val_set, &cfg, &CheckpointPolicy::default()).map_err(|e| e.to_string())?;
    let moved = backbone_snapshot(&h).map_err(|e| e.to_string())? != before;
    check(
        frozen && moved && decreasing >= 9,
        format!(
            "{} train images; backbone frozen under feature_extract: {frozen}; changed under fine_tune: {moved}; \
             loss fell in {decreasing}/10 seeds [{}]",
            train_samples.len(),
            losses.join(" ")
        ),
    )
}

fn eye_prediction(rng: &mut ChaCha8Rng, patient: &str, eye: Eye) -> Prediction {
    Prediction {
        sample_path: format!("{patient}_{}", eye.as_str()),
        truth: rng.random_range(0..5),
        predicted: rng.random_range(0..5),
        probabilities: vec![],
        patient_id: Some(patient.to_string()),
        eye: Some(eye),
    }
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    for case in 0..1000 {
        let mut set = PredictionSet::new(5);
        let patients = rng.random_range(1..10);
        for p in 0..patients {
            let pid = format!("p{p}");
            set.records.push(eye_prediction(&mut rng, &pid, Eye::Left));
            set.records.push(eye_prediction(&mut rng, &pid, Eye::Right));
        }
        let blended = blend_to_patient(&set).map_err(|e| e.to_string())?;
        if blended.len() != patients {
            return Err(format!("case {case}: {} patients, expected {patients}", blended.len()));
        }
        for r in &blended.records {
            let eyes: Vec<&Prediction> = set.records.iter().filter(|e| e.patient_id == r.patient_id).collect();
            let truth = eyes.iter().map(|e| e.truth).max().unwrap();
            let predicted = eyes.iter().map(|e| e.predicted).max().unwrap();
            if (r.truth, r.predicted) != (truth, predicted) {
                return Err(format!("case {case}: patient {:?} not the eye maximum", r.patient_id));
            }
        }
    }
    let mut cohort = PredictionSet::new(5);
    for p in 0..26_788 {
        let pid = p.to_string();
        for eye in [Eye::Left, Eye::Right] {
            cohort.records.push(eye_prediction(&mut rng, &pid, eye));
        }
    }
    let patients = blend_to_patient(&cohort).map_err(|e| e.to_string())?.len();
    check(
        cohort.len() == 53_576 && patients == 26_788,
        format!("1000 bilateral fixtures agree; {} eyes -> {patients} patients", cohort.len()),
    )
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(BIN)
        .args(args)
        .env_remove("MODEL_PROVIDER_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} exited with {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let spec = SyntheticSpec { per_class: 6, edge: 48, validation_fraction: 0.34, test_fraction: 0.34, ..Default::default() };
    write_synthetic_corpus(root, &spec).map_err(|e| e.to_string())?;
    let write = |name: &str, body: &str| -> Result<String, String> {
        let path = root.join(name);
        fs::write(&path, body).map_err(|e| e.to_string())?;
        Ok(path.to_string_lossy().into_owned())
    };
    let single = write(
        "run.ini",
        "[experiment]\nmanifest = manifest.tsv\n[model]\narchitecture = AlexNet\npretrained = false\nmode = fine_tune\n\
         [train]\nepochs = 2\nbatch_size = 4\nseed = 7\n",
    )?;
    let out = |name: &str| root.join(name).to_string_lossy().into_owned();
    cli(&["run", "--config", &single, "--out", &out("first")])?;
    cli(&["run", "--config", &single, "--out", &out("second")])?;
    let read = |name: &str| fs::read(root.join(name).join("metrics.csv")).map_err(|e| e.to_string());
    let (first, second) = (read("first")?, read("second")?);
    let identical = first == second && !first.is_empty();

    let grid = write(
        "grid.ini",
        "[experiment]\nmanifest = manifest.tsv\n[model]\narchitecture = AlexNet, ResNet-18\n\
         pretrained = false\nmode = fine_tune, feature_extract\n[train]\nepochs = 1\nbatch_size = 8\n",
    )?;
    cli(&["grid", "--config", &grid, "--out", &out("grid")])?;
    let rows = read_summary(&root.join("grid/summary.csv")).map_err(|e| e.to_string())?;
    let ok = rows.iter().filter(|r| r.status == RunStatus::Ok).count();
    let run_dirs = fs::read_dir(root.join("grid/runs")).map_err(|e| e.to_string())?.count();
    let complete = rows.iter().all(|r| Path::new(&r.run_dir).join("metrics.csv").is_file());
    check(
        identical && rows.len() == 4 && ok == 4 && run_dirs == 4 && complete,
        format!(
            "metrics.csv byte-identical across runs: {identical} ({} bytes); grid: {run_dirs} run dirs, {} summary rows, {ok} ok",
            first.len(),
            rows.len()
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [(fn() -> Outcome, u64); 9] = [
        (criterion_1, 1),
        (criterion_2, 1),
        (criterion_3, 5),
        (criterion_4, 10),
        (criterion_5, 30),
        (criterion_6, 30),
        (criterion_7, 600),
        (criterion_8, 5),
        (criterion_9, 900),
    ];
    println!();
    let mut failed = Vec::new();
    for (i, (run, budget)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let (pass, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {n}: {verdict} [{:.2}s of {budget}s] {detail}", elapsed.as_secs_f64());
        if !pass {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
