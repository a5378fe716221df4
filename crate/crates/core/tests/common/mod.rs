#![allow(dead_code)]

use std::path::PathBuf;

pub const COLUMNS: [&str; 8] =
    ["np_train_ft", "np_train_fe", "np_val_ft", "np_val_fe", "p_train_ft", "p_train_fe", "p_val_ft", "p_val_fe"];

/// Resolves from any workspace member, so sibling crates can include this
/// module by path.
pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

/// Per-network results table: one column of 16 values per header entry.
pub struct ResultsTable {
    pub networks: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl ResultsTable {
    pub fn load(name: &str) -> Self {
        let text = std::fs::read_to_string(fixture(name)).unwrap();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(&header[1..], &COLUMNS);
        let mut networks = Vec::new();
        let mut columns = vec![Vec::new(); COLUMNS.len()];
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let cells: Vec<&str> = line.split(',').collect();
            networks.push(cells[0].to_string());
            for (c, v) in columns.iter_mut().zip(&cells[1..]) {
                c.push(v.trim().parse().unwrap());
            }
        }
        Self { networks, columns }
    }

    pub fn column(&self, name: &str) -> &[f64] {
        &self.columns[COLUMNS.iter().position(|c| *c == name).unwrap()]
    }
}

/// A published p-value; `bound` marks entries printed as "<0.001".
#[derive(Debug, Clone, Copy)]
pub struct PublishedP {
    pub value: f64,
    pub bound: bool,
}

impl PublishedP {
    fn parse(s: &str) -> Self {
        match s.strip_prefix('<') {
            Some(v) => Self { value: v.parse().unwrap(), bound: true },
            None => Self { value: s.parse().unwrap(), bound: false },
        }
    }

    pub fn significant(&self) -> bool {
        self.value < 0.05
    }
}

pub struct ComparisonRow {
    pub test_no: usize,
    pub test: String,
    pub column_a: String,
    pub column_b: String,
    pub loss_p: PublishedP,
    pub accuracy_p: PublishedP,
}

pub fn comparison_rows() -> Vec<ComparisonRow> {
    let text = std::fs::read_to_string(fixture("dr_comparisons.csv")).unwrap();
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            ComparisonRow {
                test_no: c[0].parse().unwrap(),
                test: c[1].into(),
                column_a: c[2].into(),
                column_b: c[3].into(),
                loss_p: PublishedP::parse(c[4]),
                accuracy_p: PublishedP::parse(c[5]),
            }
        })
        .collect()
}

/// Exact two-sided Wilcoxon p by enumerating all 2^n sign patterns over the
/// absolute differences (zeros dropped, midranks for ties).
pub fn wilcoxon_enumeration(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = midranks(&abs);
    let observed: f64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| ranks[i]).sum();
    let total_rank: f64 = ranks.iter().sum();
    let observed = observed.min(total_rank - observed);
    let (mut lo, mut hi, mut all) = (0u64, 0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let t: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        all += 1;
        if t <= observed + 1e-9 {
            lo += 1;
        }
        if t >= total_rank - observed - 1e-9 {
            hi += 1;
        }
    }
    ((lo.min(hi) * 2).min(all)) as f64 / all as f64
}

/// Exact two-sided Mann-Whitney p by enumerating every assignment of the
/// pooled ranks to group `a`.
pub fn mann_whitney_enumeration(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let (na, n) = (a.len(), pooled.len());
    let observed: f64 = ranks[..na].iter().sum();
    let (mut lo, mut hi, mut all) = (0u64, 0u64, 0u64);
    for mask in 0u64..(1 << n) {
        if mask.count_ones() as usize != na {
            continue;
        }
        let r: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        all += 1;
        if r <= observed + 1e-9 {
            lo += 1;
        }
        if r >= observed - 1e-9 {
            hi += 1;
        }
    }
    ((lo.min(hi) * 2).min(all)) as f64 / all as f64
}

pub fn midranks(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|v| {
            let below = values.iter().filter(|w| *w < v).count() as f64;
            let equal = values.iter().filter(|w| *w == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}
