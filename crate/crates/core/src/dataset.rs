//! Labeled image manifests: loading, validation, per-split summaries and
//! stratified re-splitting.
//!
//! A manifest is a UTF-8 text file. The first line lists the class names,
//! every following line is one sample:
//!
//! ```text
//! #classes=normal,mild,moderate,severe,proliferative
//! #task=dr
//! train/10_left.jpeg	0	train	10	left
//! train/10_right.jpeg	0	train	10	right
//! test/OCT-1.jpeg	2	test
//! ```
//!
//! Columns are tab separated: `image_path`, `label`, `split`, `patient_id`,
//! `eye`. The last two are empty when unknown. Lines starting with `#` after
//! the header are metadata (`#task=`) or comments.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const CLASSES_PREFIX: &str = "#classes=";
const TASK_PREFIX: &str = "#task=";
const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest file not found: {0}")]
    MissingFile(PathBuf),
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("line {line}: label {label} outside 0..{num_classes}")]
    InvalidLabel { line: usize, label: i64, num_classes: usize },
    #[error("line {line}: duplicate (patient, eye, split) entry")]
    DuplicateEye { line: usize },
    #[error("split '{0}' has no samples")]
    EmptySplit(Split),
    #[error("fraction {0} outside (0, 1)")]
    FractionOutOfRange(f64),
    #[error("split '{split}' has {size} samples, too few to move {fraction} of it per class ({num_classes} classes)")]
    SplitTooSmall { split: Split, size: usize, fraction: f64, num_classes: usize },
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    Unassigned,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Validation, Split::Test, Split::Unassigned];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" | "training" => Ok(Split::Train),
            "validation" | "val" | "valid" => Ok(Split::Validation),
            "test" | "testing" => Ok(Split::Test),
            "unassigned" | "" => Ok(Split::Unassigned),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eye {
    Left,
    Right,
}

impl Eye {
    pub fn as_str(self) -> &'static str {
        match self {
            Eye::Left => "left",
            Eye::Right => "right",
        }
    }
}

impl fmt::Display for Eye {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Eye {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" | "l" => Ok(Eye::Left),
            "right" | "r" => Ok(Eye::Right),
            other => Err(format!("unknown eye '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub label: usize,
    pub split: Split,
    pub patient_id: Option<String>,
    pub eye: Option<Eye>,
}

impl SampleRecord {
    pub fn new(image_path: impl Into<PathBuf>, label: usize, split: Split) -> Self {
        Self { image_path: image_path.into(), label, split, patient_id: None, eye: None }
    }

    pub fn with_patient(mut self, patient_id: impl Into<String>, eye: Option<Eye>) -> Self {
        self.patient_id = Some(patient_id.into());
        self.eye = eye;
        self
    }
}

/// Immutable catalog of labeled samples for one classification task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    task_name: String,
    class_names: Vec<String>,
    samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    /// Builds a manifest, checking label bounds, eye/patient consistency and
    /// uniqueness of (patient, eye, split).
    pub fn new(
        task_name: impl Into<String>,
        class_names: Vec<String>,
        samples: Vec<SampleRecord>,
    ) -> Result<Self> {
        let task_name = task_name.into();
        validate_class_names(&class_names)?;
        let mut seen = HashSet::new();
        for (i, s) in samples.iter().enumerate() {
            // 1-based row numbers, matching the file layout after the header.
            let line = i + 2;
            check_sample(s, class_names.len(), line)?;
            if let Some(pid) = &s.patient_id {
                if !seen.insert((pid.clone(), s.eye, s.split)) {
                    return Err(DatasetError::DuplicateEye { line });
                }
            }
        }
        Ok(Self { task_name, class_names, samples })
    }

    pub fn task_name(&self) -> &str {
        &self.task_name
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn samples(&self) -> &[SampleRecord] {
        &self.samples
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn split_samples(&self, split: Split) -> Vec<SampleRecord> {
        self.split(split).cloned().collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn distinct_patients(&self) -> usize {
        self.samples
            .iter()
            .filter_map(|s| s.patient_id.as_deref())
            .collect::<HashSet<_>>()
            .len()
    }
}

fn validate_class_names(class_names: &[String]) -> Result<()> {
    if class_names.len() < 2 {
        return Err(DatasetError::Invalid(format!(
            "need at least 2 classes, got {}",
            class_names.len()
        )));
    }
    let mut seen = HashSet::new();
    for name in class_names {
        if name.is_empty() || name.contains([',', '\t', '\n']) {
            return Err(DatasetError::Invalid(format!("bad class name '{name}'")));
        }
        if !seen.insert(name) {
            return Err(DatasetError::Invalid(format!("duplicate class name '{name}'")));
        }
    }
    Ok(())
}

fn check_sample(s: &SampleRecord, num_classes: usize, line: usize) -> Result<()> {
    if s.label >= num_classes {
        return Err(DatasetError::InvalidLabel { line, label: s.label as i64, num_classes });
    }
    if s.eye.is_some() && s.patient_id.is_none() {
        return Err(DatasetError::MalformedRow { line, reason: "eye given without patient_id".into() });
    }
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(DatasetError::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .map(|(_, l)| l.trim_end_matches('\r'))
        .ok_or_else(|| DatasetError::MalformedRow { line: 1, reason: "empty file".into() })?;
    let class_list = header.strip_prefix(CLASSES_PREFIX).ok_or_else(|| DatasetError::MalformedRow {
        line: 1,
        reason: format!("expected header starting with '{CLASSES_PREFIX}'"),
    })?;
    let class_names: Vec<String> = class_list.split(',').map(|s| s.trim().to_string()).collect();
    validate_class_names(&class_names)?;
    let k = class_names.len();

    let mut task_name = String::new();
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let row = raw.trim_end_matches('\r');
        if row.trim().is_empty() {
            continue;
        }
        if row.starts_with('#') {
            if let Some(name) = row.strip_prefix(TASK_PREFIX) {
                task_name = name.trim().to_string();
            }
            continue;
        }
        let sample = parse_row(row, line, k)?;
        if let Some(pid) = &sample.patient_id {
            if !seen.insert((pid.clone(), sample.eye, sample.split)) {
                return Err(DatasetError::DuplicateEye { line });
            }
        }
        samples.push(sample);
    }
    Ok(DatasetManifest { task_name, class_names, samples })
}

fn parse_row(row: &str, line: usize, num_classes: usize) -> Result<SampleRecord> {
    let fields: Vec<&str> = row.split('\t').collect();
    if !(3..=5).contains(&fields.len()) {
        return Err(DatasetError::MalformedRow {
            line,
            reason: format!("expected 3 to 5 tab-separated fields, found {}", fields.len()),
        });
    }
    let malformed = |reason: String| DatasetError::MalformedRow { line, reason };
    if fields[0].is_empty() {
        return Err(malformed("empty image path".into()));
    }
    let label: i64 = fields[1]
        .trim()
        .parse()
        .map_err(|_| malformed(format!("label '{}' is not an integer", fields[1])))?;
    if label < 0 || label as usize >= num_classes {
        return Err(DatasetError::InvalidLabel { line, label, num_classes });
    }
    let split: Split = fields[2].parse().map_err(malformed)?;
    let patient_id = fields.get(3).map(|s| s.trim()).filter(|s| !s.is_empty()).map(str::to_string);
    let eye = match fields.get(4).map(|s| s.trim()).filter(|s| !s.is_empty()) {
        Some(e) => Some(e.parse::<Eye>().map_err(malformed)?),
        None => None,
    };
    let sample = SampleRecord { image_path: PathBuf::from(fields[0]), label: label as usize, split, patient_id, eye };
    check_sample(&sample, num_classes, line)?;
    Ok(sample)
}

/// Serializes a manifest in the format read by [`load_manifest`].
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    out.write_all(manifest_to_string(manifest)?.as_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn manifest_to_string(manifest: &DatasetManifest) -> Result<String> {
    let mut s = String::new();
    s.push_str(CLASSES_PREFIX);
    s.push_str(&manifest.class_names.join(","));
    s.push('\n');
    if !manifest.task_name.is_empty() {
        s.push_str(TASK_PREFIX);
        s.push_str(&manifest.task_name);
        s.push('\n');
    }
    for sample in &manifest.samples {
        let path = sample.image_path.to_string_lossy();
        let pid = sample.patient_id.as_deref().unwrap_or("");
        if path.contains(['\t', '\n']) || pid.contains(['\t', '\n']) || path.starts_with('#') {
            return Err(DatasetError::Invalid(format!("unserializable sample path or patient id: {path}")));
        }
        let eye = sample.eye.map(Eye::as_str).unwrap_or("");
        s.push_str(&format!("{path}\t{}\t{}\t{pid}\t{eye}\n", sample.label, sample.split));
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub split: Split,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
}

impl ClassDistribution {
    pub fn from_counts(split: Split, counts: Vec<usize>) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(DatasetError::EmptySplit(split));
        }
        let fractions = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(Self { split, counts, fractions })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Fractions expressed as percentages.
    pub fn percentages(&self) -> Vec<f64> {
        self.fractions.iter().map(|f| f * 100.0).collect()
    }
}

pub fn class_distribution(manifest: &DatasetManifest, split: Split) -> Result<ClassDistribution> {
    let mut counts = vec![0usize; manifest.num_classes()];
    for s in manifest.split(split) {
        counts[s.label] += 1;
    }
    ClassDistribution::from_counts(split, counts)
}

/// Largest-remainder allocation of `round(fraction * total)` items across
/// classes proportionally to `class_sizes`. Ties go to the lower class index.
pub fn allocate_stratified(class_sizes: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = class_sizes.iter().sum();
    let target = (fraction * total as f64).round() as usize;
    let quotas: Vec<f64> = class_sizes.iter().map(|&n| fraction * n as f64).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..class_sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut remaining = target.saturating_sub(assigned);
    for &k in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        if alloc[k] < class_sizes[k] {
            alloc[k] += 1;
            remaining -= 1;
        }
    }
    alloc
}

/// Moves a class-stratified `fraction` of `source` into the validation
/// split. The selection is a deterministic function of `seed`.
pub fn stratified_split(
    manifest: &DatasetManifest,
    source: Split,
    fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::FractionOutOfRange(fraction));
    }
    let k = manifest.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, s) in manifest.samples.iter().enumerate() {
        if s.split == source {
            by_class[s.label].push(i);
        }
    }
    let size: usize = by_class.iter().map(Vec::len).sum();
    if size == 0 {
        return Err(DatasetError::EmptySplit(source));
    }
    if fraction * (size as f64) < k as f64 {
        return Err(DatasetError::SplitTooSmall { split: source, size, fraction, num_classes: k });
    }
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let alloc = allocate_stratified(&sizes, fraction);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = manifest.samples.clone();
    for (members, take) in by_class.iter_mut().zip(alloc) {
        members.shuffle(&mut rng);
        for &i in members.iter().take(take) {
            samples[i].split = Split::Validation;
        }
    }
    DatasetManifest::new(manifest.task_name.clone(), manifest.class_names.clone(), samples)
}

/// Parses `<patient>_<left|right>` file stems.
pub fn patient_eye_from_stem(stem: &str) -> Option<(String, Eye)> {
    let (patient, eye) = stem.rsplit_once('_')?;
    if patient.is_empty() {
        return None;
    }
    let eye = match eye.to_ascii_lowercase().as_str() {
        "left" => Eye::Left,
        "right" => Eye::Right,
        _ => return None,
    };
    Some((patient.to_string(), eye))
}

/// Builds a manifest from a directory-per-class layout.
///
/// When `root` has `train`/`val`/`test` subdirectories, each is read as a
/// split containing class directories; otherwise `root`'s subdirectories are
/// the classes and every sample is `unassigned`. `class_order` fixes the
/// label indices; by default class directories are sorted by name. Image
/// paths are stored relative to `root`.
pub fn import_class_dirs(
    root: impl AsRef<Path>,
    task_name: &str,
    class_order: Option<&[String]>,
) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(DatasetError::MissingFile(root.to_path_buf()));
    }
    let mut split_dirs: BTreeMap<Split, PathBuf> = BTreeMap::new();
    for entry in sorted_subdirs(root)? {
        let name = entry.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if let Ok(split) = name.parse::<Split>() {
            if split != Split::Unassigned {
                split_dirs.insert(split, entry);
            }
        }
    }
    let layout: Vec<(Split, PathBuf)> = if split_dirs.is_empty() {
        vec![(Split::Unassigned, root.to_path_buf())]
    } else {
        split_dirs.into_iter().collect()
    };

    let mut discovered: Vec<String> = Vec::new();
    for (_, dir) in &layout {
        for class_dir in sorted_subdirs(dir)? {
            let name = class_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            if !discovered.contains(&name) {
                discovered.push(name);
            }
        }
    }
    discovered.sort();
    let class_names: Vec<String> = match class_order {
        Some(order) => {
            if let Some(missing) = discovered.iter().find(|d| !order.contains(d)) {
                return Err(DatasetError::Invalid(format!(
                    "class directory '{missing}' not listed in the class order"
                )));
            }
            order.to_vec()
        }
        None => discovered,
    };

    let mut samples = Vec::new();
    for (split, dir) in &layout {
        for class_dir in sorted_subdirs(dir)? {
            let name = class_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let label = class_names.iter().position(|c| c == name).expect("class listed above");
            let mut files: Vec<PathBuf> = fs::read_dir(&class_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| is_image(p))
                .collect();
            files.sort();
            for file in files {
                let rel = file.strip_prefix(root).unwrap_or(&file).to_path_buf();
                let mut sample = SampleRecord::new(rel, label, *split);
                if let Some((patient, eye)) =
                    file.file_stem().and_then(|s| s.to_str()).and_then(patient_eye_from_stem)
                {
                    sample = sample.with_patient(patient, Some(eye));
                }
                samples.push(sample);
            }
        }
    }
    DatasetManifest::new(task_name, class_names, samples)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Resolves a manifest image path against the directory holding the images.
pub fn resolve_image_path(image_root: &Path, sample: &SampleRecord) -> PathBuf {
    if sample.image_path.is_absolute() {
        sample.image_path.clone()
    } else {
        image_root.join(&sample.image_path)
    }
}
