mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use retina_bench::dataset::*;

fn manifest_with_counts(task: &str, split: Split, counts: &[usize]) -> DatasetManifest {
    let names = (0..counts.len()).map(|c| format!("class{c}")).collect();
    let samples = counts
        .iter()
        .enumerate()
        .flat_map(|(label, &n)| (0..n).map(move |i| SampleRecord::new(format!("{label}/{i}.jpeg"), label, split)))
        .collect();
    DatasetManifest::new(task, names, samples).unwrap()
}

struct DistRow {
    task: String,
    split: Split,
    count: usize,
    percent: f64,
}

fn published_distributions() -> Vec<DistRow> {
    let text = std::fs::read_to_string(common::fixture("class_distributions.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            DistRow { task: c[0].into(), split: c[1].parse().unwrap(), count: c[3].parse().unwrap(), percent: c[4].parse().unwrap() }
        })
        .collect()
}

#[test]
fn published_distributions_are_reproduced() {
    let rows = published_distributions();
    let mut checked = 0;
    for task in ["dr", "oct"] {
        for split in [Split::Train, Split::Validation, Split::Test] {
            let group: Vec<&DistRow> = rows.iter().filter(|r| r.task == task && r.split == split).collect();
            let counts: Vec<usize> = group.iter().map(|r| r.count).collect();
            let m = manifest_with_counts(task, split, &counts);
            let d = class_distribution(&m, split).unwrap();
            assert_eq!(d.counts, counts);
            assert!((d.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (pct, row) in d.percentages().iter().zip(&group) {
                assert!((pct - row.percent).abs() <= 0.1, "{task} {split}: {pct} vs {}", row.percent);
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 27);
}

#[test]
fn training_split_cardinality() {
    let m = manifest_with_counts("dr", Split::Train, &[23229, 2199, 4763, 786, 638]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.tsv");
    write_manifest(&m, &path).unwrap();
    let loaded = load_manifest(&path).unwrap();
    assert_eq!(loaded.split_len(Split::Train), 31_615);
    assert!((class_distribution(&loaded, Split::Train).unwrap().fractions[0] - 0.735).abs() <= 0.001);
}

#[test]
fn six_row_manifest() {
    let text = "#classes=c0,c1,c2,c3,c4\n\
                a/1_left.png\t0\ttrain\t1\tleft\n\
                a/1_right.png\t2\ttrain\t1\tright\n\
                a/2_left.png\t1\ttrain\t2\tleft\n\
                a/2_right.png\t0\ttrain\t2\tright\n\
                b/x.png\t4\ttest\t\t\n\
                b/y.png\t3\ttest\t\t\n";
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tsv");
    std::fs::write(&path, text).unwrap();
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.samples().len(), 6);
    assert_eq!(m.distinct_patients(), 2);
    assert_eq!(m.num_classes(), 5);
}

#[test]
fn label_outside_class_list_is_rejected() {
    let err = parse_manifest("#classes=a,b,c,d,e\nx.png\t1\ttrain\t\t\ny.png\t7\ttrain\t\t\n").unwrap_err();
    assert!(matches!(err, DatasetError::InvalidLabel { line: 3, label: 7, .. }), "{err}");
    assert!(matches!(load_manifest("/nonexistent/manifest.tsv"), Err(DatasetError::MissingFile(_))));
}

#[test]
fn empty_split_distribution() {
    let m = manifest_with_counts("t", Split::Train, &[3, 3]);
    assert!(matches!(class_distribution(&m, Split::Test), Err(DatasetError::EmptySplit(Split::Test))));
}

#[test]
fn oct_validation_carve_out() {
    // training pool = published train + validation counts
    let pool = [46026 + 5114, 10213 + 1135, 33485 + 3720, 7754 + 862];
    assert_eq!(pool.iter().sum::<usize>(), 108_309);
    let m = manifest_with_counts("oct", Split::Train, &pool);
    let split = stratified_split(&m, Split::Train, 0.10, 42).unwrap();
    assert_eq!(split.split_len(Split::Validation), 10_831);
    assert_eq!(split.split_len(Split::Train), 97_478);
    let again = stratified_split(&m, Split::Train, 0.10, 42).unwrap();
    assert_eq!(split, again);
}

#[test]
fn small_pool_is_stratified_for_every_seed() {
    let m = manifest_with_counts("t", Split::Train, &[40, 30, 20, 10]);
    for seed in 0..20 {
        let s = stratified_split(&m, Split::Train, 0.10, seed).unwrap();
        let d = class_distribution(&s, Split::Validation).unwrap();
        assert_eq!(d.total(), 10);
        for (k, &n) in [40usize, 30, 20, 10].iter().enumerate() {
            let want = n as f64 * 0.10;
            assert!((d.counts[k] as f64 - want).abs() <= 1.0, "seed {seed} class {k}: {}", d.counts[k]);
        }
        // partition: every source sample lands in exactly one of the two splits
        let val: HashSet<_> = s.split(Split::Validation).map(|r| r.image_path.clone()).collect();
        let rest: HashSet<_> = s.split(Split::Train).map(|r| r.image_path.clone()).collect();
        assert!(val.is_disjoint(&rest));
        assert_eq!(val.len() + rest.len(), 100);
    }
}

#[test]
fn split_errors() {
    let m = manifest_with_counts("t", Split::Train, &[5, 5]);
    assert!(matches!(stratified_split(&m, Split::Test, 0.5, 0), Err(DatasetError::EmptySplit(Split::Test))));
    assert!(matches!(stratified_split(&m, Split::Train, 1.5, 0), Err(DatasetError::FractionOutOfRange(_))));
    assert!(matches!(stratified_split(&m, Split::Train, 0.1, 0), Err(DatasetError::SplitTooSmall { .. })));
}

#[test]
fn eye_requires_patient_and_triples_are_unique() {
    let mut orphan = SampleRecord::new("x.png", 0, Split::Train);
    orphan.eye = Some(Eye::Left);
    assert!(DatasetManifest::new("t", vec!["a".into(), "b".into()], vec![orphan]).is_err());
    let twice = vec![
        SampleRecord::new("x.png", 0, Split::Train).with_patient("7", Some(Eye::Left)),
        SampleRecord::new("y.png", 1, Split::Train).with_patient("7", Some(Eye::Left)),
    ];
    assert!(matches!(
        DatasetManifest::new("t", vec!["a".into(), "b".into()], twice),
        Err(DatasetError::DuplicateEye { line: 3 })
    ));
}

#[test]
fn importer_reads_split_and_class_directories() {
    let dir = tempfile::tempdir().unwrap();
    for (split, class, file) in [
        ("train", "NORMAL", "1_left.png"),
        ("train", "DME", "2_right.jpeg"),
        ("test", "NORMAL", "scan.jpg"),
        ("test", "DME", "notes.txt"),
    ] {
        let d = dir.path().join(split).join(class);
        std::fs::create_dir_all(&d).unwrap();
        std::fs::write(d.join(file), b"").unwrap();
    }
    let order = vec!["NORMAL".to_string(), "DME".to_string()];
    let m = import_class_dirs(dir.path(), "oct", Some(&order)).unwrap();
    assert_eq!(m.class_names(), order.as_slice());
    assert_eq!(m.samples().len(), 3);
    assert_eq!(m.split_len(Split::Train), 2);
    let left = m.samples().iter().find(|s| s.image_path.ends_with("1_left.png")).unwrap();
    assert_eq!((left.label, left.patient_id.as_deref(), left.eye), (0, Some("1"), Some(Eye::Left)));
}

fn arb_manifest() -> impl Strategy<Value = DatasetManifest> {
    let sample = (0usize..4, 0usize..4, prop::option::of((0u32..30, prop::option::of(any::<bool>()))), "[a-z]{1,6}");
    prop::collection::vec(sample, 1..40).prop_map(|rows| {
        let mut seen = HashSet::new();
        let samples = rows
            .into_iter()
            .enumerate()
            .filter_map(|(i, (label, split, patient, stem))| {
                let split = Split::ALL[split];
                let mut s = SampleRecord::new(format!("{stem}/{i}.png"), label, split);
                if let Some((pid, eye)) = patient {
                    let eye = eye.map(|l| if l { Eye::Left } else { Eye::Right });
                    if !seen.insert((pid, eye, split)) {
                        return None;
                    }
                    s = s.with_patient(pid.to_string(), eye);
                }
                Some(s)
            })
            .collect();
        DatasetManifest::new("prop", vec!["a".into(), "b".into(), "c".into(), "d".into()], samples).unwrap()
    })
}

proptest! {
    #[test]
    fn manifest_round_trips_through_text(m in arb_manifest()) {
        let text = manifest_to_string(&m).unwrap();
        prop_assert_eq!(parse_manifest(&text).unwrap(), m);
    }

    #[test]
    fn allocation_hits_the_rounded_total(sizes in prop::collection::vec(0usize..500, 2..6), f in 0.01f64..0.99) {
        let alloc = allocate_stratified(&sizes, f);
        let total: usize = sizes.iter().sum();
        prop_assert_eq!(alloc.iter().sum::<usize>(), (f * total as f64).round() as usize);
        for (a, n) in alloc.iter().zip(&sizes) {
            prop_assert!((*a as f64 - f * *n as f64).abs() <= 1.0);
        }
    }
}
