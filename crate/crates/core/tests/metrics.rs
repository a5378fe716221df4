use approx::assert_abs_diff_eq;
use num_rational::Ratio;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retina_bench::dataset::Eye;
use retina_bench::metrics::*;

type Q = Ratio<i128>;

fn pred(truth: usize, predicted: usize, patient: Option<&str>, eye: Option<Eye>) -> Prediction {
    Prediction {
        sample_path: format!("{}_{}", patient.unwrap_or("x"), eye.map(Eye::as_str).unwrap_or("")),
        truth,
        predicted,
        probabilities: vec![],
        patient_id: patient.map(Into::into),
        eye,
    }
}

/// Kappa from the textbook definition, evaluated in exact rationals:
/// O = counts / N, E = outer product of O's marginals,
/// W[i][j] = (i-j)^2 / (K-1)^2, kappa = 1 - sum(W*O) / sum(W*E).
fn kappa_oracle(counts: &[Vec<u64>]) -> Option<Q> {
    let k = counts.len();
    let n: i128 = counts.iter().flatten().map(|&c| c as i128).sum();
    let o: Vec<Vec<Q>> = counts.iter().map(|r| r.iter().map(|&c| Q::new(c as i128, n)).collect()).collect();
    let rows: Vec<Q> = o.iter().map(|r| r.iter().copied().sum()).collect();
    let cols: Vec<Q> = (0..k).map(|j| o.iter().map(|r| r[j]).sum()).collect();
    let w = |i: usize, j: usize| Q::new((i as i128 - j as i128).pow(2), ((k - 1) * (k - 1)) as i128);
    let mut num = Q::from_integer(0);
    let mut den = Q::from_integer(0);
    for i in 0..k {
        for j in 0..k {
            num += w(i, j) * o[i][j];
            den += w(i, j) * rows[i] * cols[j];
        }
    }
    (den != Q::from_integer(0)).then(|| Q::from_integer(1) - num / den)
}

fn to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

fn random_matrix(rng: &mut ChaCha8Rng, k: usize) -> ConfusionMatrix {
    let max = rng.random_range(1..30);
    ConfusionMatrix::from_counts((0..k).map(|_| (0..k).map(|_| rng.random_range(0..=max)).collect()).collect())
}

#[test]
fn confusion_matrix_examples() {
    let mut set = PredictionSet::new(3);
    set.records = (0..3).map(|c| pred(c, c, None, None)).collect();
    let cm = confusion_matrix(&set, 3).unwrap();
    assert_eq!(cm.counts(), &[vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
    assert_eq!(confusion_matrix(&PredictionSet::new(4), 4).unwrap(), ConfusionMatrix::zeros(4));
    let cm = ConfusionMatrix::from_labels(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
    assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 1), cm.get(1, 0)), (1, 1, 1, 0));
    assert!(matches!(
        ConfusionMatrix::from_labels(&[0, 5], &[0, 1], 5),
        Err(MetricsError::LabelOutOfRange { label: 5, num_classes: 5 })
    ));
}

#[test]
fn accuracy_examples() {
    assert_eq!(accuracy(&ConfusionMatrix::from_counts(vec![vec![5, 0], vec![0, 5]])).unwrap(), 1.0);
    assert_eq!(accuracy(&ConfusionMatrix::from_counts(vec![vec![0, 3], vec![4, 0]])).unwrap(), 0.0);
    assert!(matches!(accuracy(&ConfusionMatrix::zeros(3)), Err(MetricsError::EmptyMatrix)));
    // counts of the screening example: positives are column/row 1
    let cm = ConfusionMatrix::from_counts(vec![vec![37306, 2227], vec![7732, 6311]]);
    assert_abs_diff_eq!(accuracy(&cm).unwrap(), (6311.0 + 37306.0) / 53576.0, epsilon = 1e-15);
    assert_abs_diff_eq!(accuracy(&cm).unwrap(), 0.8141, epsilon = 0.0001);
}

#[test]
fn screening_counts_reproduce_published_rates() {
    let bc = BinaryConfusion { tp: 6311, tn: 37306, fp: 2227, fn_: 7732 };
    assert_abs_diff_eq!(100.0 * sensitivity(&bc).unwrap(), 44.9, epsilon = 0.05);
    assert_abs_diff_eq!(100.0 * specificity(&bc).unwrap(), 94.4, epsilon = 0.05);
    assert_eq!(bc.total(), 53576);
}

#[test]
fn undefined_rates() {
    let bc = BinaryConfusion { tp: 3, tn: 0, fp: 0, fn_: 0 };
    assert_eq!(sensitivity(&bc).unwrap(), 1.0);
    assert!(matches!(specificity(&bc), Err(MetricsError::UndefinedMetric(_))));
}

#[test]
fn binarize_examples() {
    let counts: Vec<Vec<u64>> =
        (0..5).map(|i| (0..5).map(|j| if i == j { [10, 1, 2, 3, 4][i] } else { 0 }).collect()).collect();
    let diag = ConfusionMatrix::from_counts(counts);
    assert_eq!(binarize(&diag, BinarizationScheme::AnyDisease), BinaryConfusion { tp: 10, tn: 10, fp: 0, fn_: 0 });

    let single = |t: usize, p: usize, n: u64| {
        let mut c = vec![vec![0u64; 5]; 5];
        c[t][p] = n;
        ConfusionMatrix::from_counts(c)
    };
    assert_eq!(binarize(&single(0, 2, 5), BinarizationScheme::Referable).fp, 5);
    assert_eq!(binarize(&single(1, 0, 4), BinarizationScheme::Referable).tn, 4);
    assert_eq!(BinarizationScheme::Referable.positive_classes(5), vec![2, 3, 4]);
    assert_eq!(BinarizationScheme::AnyDisease.positive_classes(4), vec![1, 2, 3]);
}

#[test]
fn kappa_on_diagonal_matrices_is_one() {
    let cm = ConfusionMatrix::from_counts(vec![vec![3, 0, 0], vec![0, 4, 0], vec![0, 0, 5]]);
    assert_eq!(quadratic_weighted_kappa(&cm).unwrap().kappa, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let k = rng.random_range(2..=6);
        let mut c = vec![vec![0u64; k]; k];
        for (i, row) in c.iter_mut().enumerate() {
            row[i] = rng.random_range(0..20);
        }
        c[0][0] += 1;
        c[k - 1][k - 1] += 1;
        assert_abs_diff_eq!(quadratic_weighted_kappa(&ConfusionMatrix::from_counts(c)).unwrap().kappa, 1.0, epsilon = 1e-12);
    }
}

#[test]
fn kappa_worked_example_matches_oracle() {
    let counts = vec![vec![2, 1, 0], vec![0, 2, 1], vec![0, 0, 3]];
    let k = quadratic_weighted_kappa(&ConfusionMatrix::from_counts(counts.clone())).unwrap();
    assert_abs_diff_eq!(k.kappa, to_f64(kappa_oracle(&counts).unwrap()), epsilon = 1e-9);
}

#[test]
fn kappa_breakdown_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let k = rng.random_range(2..=6);
        let cm = random_matrix(&mut rng, k);
        let Ok(b) = quadratic_weighted_kappa(&cm) else { continue };
        let so: f64 = b.observed.iter().flatten().sum();
        let se: f64 = b.expected.iter().flatten().sum();
        assert_abs_diff_eq!(so, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(se, 1.0, epsilon = 1e-9);
        for i in 0..k {
            assert_eq!(b.weights[i][i], 0.0);
            for j in 0..k {
                assert_eq!(b.weights[i][j], b.weights[j][i]);
            }
        }
    }
}

#[test]
fn kappa_matches_exact_oracle_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    while checked < 1000 {
        let k = rng.random_range(2..=6);
        let cm = random_matrix(&mut rng, k);
        let Some(expected) = kappa_oracle(cm.counts()) else { continue };
        let got = quadratic_weighted_kappa(&cm).unwrap().kappa;
        assert_abs_diff_eq!(got, to_f64(expected), epsilon = 1e-9);
        checked += 1;
    }
}

#[test]
fn kappa_symmetry_and_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    while checked < 1000 {
        let k = rng.random_range(2..=6);
        let cm = random_matrix(&mut rng, k);
        let Ok(b) = quadratic_weighted_kappa(&cm) else { continue };
        let t = quadratic_weighted_kappa(&cm.transpose()).unwrap();
        assert_abs_diff_eq!(b.kappa, t.kappa, epsilon = 1e-9);
        assert!((-1.0..=1.0).contains(&b.kappa), "{}", b.kappa);
        checked += 1;
    }
}

#[test]
fn kappa_degenerate_marginals() {
    let mut c = vec![vec![0u64; 5]; 5];
    c[0][0] = 7;
    assert!(matches!(
        quadratic_weighted_kappa(&ConfusionMatrix::from_counts(c)),
        Err(MetricsError::DegenerateMarginals)
    ));
}

#[test]
fn kappa_categories() {
    assert_eq!(kappa_category(0.56), "Moderate");
    assert_eq!(kappa_category(0.005), "Poor");
    assert_eq!(kappa_category(1.0), "Very good");
    assert_eq!(kappa_category(-0.3), "Poor");
    assert_eq!(kappa_category(0.20), "Fair");
    assert_eq!(kappa_category(0.40), "Fair");
    assert_eq!(kappa_category(0.60), "Moderate");
    assert_eq!(kappa_category(0.80), "Good");
}

#[test]
fn blending_examples() {
    let mut set = PredictionSet::new(5);
    set.records = vec![
        pred(0, 0, Some("p1"), Some(Eye::Left)),
        pred(2, 3, Some("p1"), Some(Eye::Right)),
        pred(1, 4, Some("p2"), Some(Eye::Left)),
    ];
    let blended = blend_to_patient(&set).unwrap();
    assert_eq!(blended.len(), 2);
    assert_eq!((blended.records[0].truth, blended.records[0].predicted), (2, 3));
    assert_eq!((blended.records[1].truth, blended.records[1].predicted), (1, 4));
    assert!(blended.records.iter().all(|r| r.probabilities.is_empty()));

    set.records.push(pred(1, 1, None, None));
    assert!(matches!(blend_to_patient(&set), Err(MetricsError::MissingPatientId(_))));
}

#[test]
fn blending_collapses_full_test_cohort() {
    let mut set = PredictionSet::new(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for p in 0..26_788 {
        let pid = format!("{p}");
        for eye in [Eye::Left, Eye::Right] {
            set.records.push(pred(rng.random_range(0..5), rng.random_range(0..5), Some(&pid), Some(eye)));
        }
    }
    assert_eq!(set.len(), 53_576);
    assert_eq!(blend_to_patient(&set).unwrap().len(), 26_788);
}

#[test]
fn blending_takes_the_maximum_on_random_bilateral_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let mut set = PredictionSet::new(5);
        let patients = rng.random_range(1..8);
        let mut eyes = Vec::new();
        for p in 0..patients {
            let pid = format!("p{p}");
            let both = rng.random_bool(0.8);
            for eye in if both { vec![Eye::Left, Eye::Right] } else { vec![Eye::Left] } {
                let r = pred(rng.random_range(0..5), rng.random_range(0..5), Some(&pid), Some(eye));
                eyes.push(r.clone());
                set.records.push(r);
            }
        }
        let blended = blend_to_patient(&set).unwrap();
        assert_eq!(blended.len(), patients);
        for r in &blended.records {
            let mine: Vec<_> = eyes.iter().filter(|e| e.patient_id == r.patient_id).collect();
            assert_eq!(r.truth, mine.iter().map(|e| e.truth).max().unwrap());
            assert_eq!(r.predicted, mine.iter().map(|e| e.predicted).max().unwrap());
        }
    }
}

#[test]
fn predictions_file_round_trip() {
    let mut set = PredictionSet::new(3);
    set.records = vec![
        Prediction {
            sample_path: "a.png".into(),
            truth: 2,
            predicted: 1,
            probabilities: vec![0.25, 0.5, 0.25],
            patient_id: Some("p".into()),
            eye: Some(Eye::Right),
        },
        pred(0, 0, None, None),
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("predictions.tsv");
    write_predictions(&set, &path).unwrap();
    assert_eq!(read_predictions(&path).unwrap(), set);
    assert!(matches!(parse_predictions("a\t1\n"), Err(MetricsError::MalformedRow { line: 1, .. })));
}

proptest! {
    #[test]
    fn binarize_conserves_mass(cells in prop::collection::vec(0u64..50, 25)) {
        let cm = ConfusionMatrix::from_counts(cells.chunks(5).map(|c| c.to_vec()).collect());
        for scheme in BinarizationScheme::ALL {
            prop_assert_eq!(binarize(&cm, scheme).total(), cm.total());
        }
    }

    #[test]
    fn rates_complement_miss_rates(tp in 0u64..1000, tn in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
        let bc = BinaryConfusion { tp, tn, fp, fn_ };
        if tp + fn_ > 0 {
            prop_assert!((sensitivity(&bc).unwrap() + fn_ as f64 / (tp + fn_) as f64 - 1.0).abs() < 1e-12);
        }
        if tn + fp > 0 {
            prop_assert!((specificity(&bc).unwrap() + fp as f64 / (tn + fp) as f64 - 1.0).abs() < 1e-12);
        }
    }
}
