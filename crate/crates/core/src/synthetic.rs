//! Deterministic synthetic fundus-like corpora for smoke tests and demos.
//!
//! Every image is a bright disk on a dark frame. The disk color encodes the
//! class (class `c` raises channel `c % 3`) and the frame carries a faint tint
//! of the same channel, so even a small crop is linearly separable from mean
//! channel intensities. Consecutive images of a class
//! form the left and right eye of one patient.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{write_manifest, DatasetError, DatasetManifest, Eye, Result, SampleRecord, Split};
use crate::imaging::Rgb32FImage;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub task_name: String,
    pub num_classes: usize,
    pub per_class: usize,
    pub edge: u32,
    /// Fractions of each class assigned to validation and test; the rest is
    /// training data.
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            task_name: "synthetic".into(),
            num_classes: 3,
            per_class: 100,
            edge: 64,
            validation_fraction: 0.2,
            test_fraction: 0.0,
            seed: 0,
        }
    }
}

/// Renders one image of class `label`.
pub fn synthetic_image(label: usize, edge: u32, rng: &mut impl Rng) -> Rgb32FImage {
    let mut base = [0.25f32; 3];
    base[label % 3] = 0.75;
    // classes beyond three also shift overall brightness
    let lift = (label / 3) as f32 * 0.1;
    let jitter: f32 = rng.random_range(-0.05..0.05);
    let radius = edge as f64 * rng.random_range(0.38..0.46);
    let c = edge as f64 / 2.0;
    let noise: Vec<f32> = (0..edge * edge * 3).map(|_| rng.random_range(-0.06..0.06)).collect();
    ImageBuffer::from_fn(edge, edge, |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
        if dx * dx + dy * dy > radius * radius {
            let mut tint = [0.0; 3];
            tint[label % 3] = 0.1;
            return Rgb(tint);
        }
        let i = ((y * edge + x) * 3) as usize;
        Rgb(std::array::from_fn(|ch| (base[ch] + lift + jitter + noise[i + ch]).clamp(0.0, 1.0)))
    })
}

/// Writes `images/<class>/<patient>_<eye>.png` files under `dir` plus
/// `manifest.tsv`, and returns the manifest.
pub fn write_synthetic_corpus(dir: &Path, spec: &SyntheticSpec) -> Result<DatasetManifest> {
    if spec.num_classes < 2 || spec.per_class == 0 || spec.edge < 8 {
        return Err(DatasetError::Invalid("synthetic corpus needs >= 2 classes, >= 1 image, edge >= 8".into()));
    }
    let fractions = spec.validation_fraction + spec.test_fraction;
    if !(0.0..1.0).contains(&spec.validation_fraction) || !(0.0..1.0).contains(&spec.test_fraction) || fractions >= 1.0 {
        return Err(DatasetError::FractionOutOfRange(fractions));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::new();
    for label in 0..spec.num_classes {
        let class_dir = dir.join("images").join(format!("class{label}"));
        fs::create_dir_all(&class_dir)?;
        let n_val = (spec.per_class as f64 * spec.validation_fraction).round() as usize;
        let n_test = (spec.per_class as f64 * spec.test_fraction).round() as usize;
        for i in 0..spec.per_class {
            let patient = format!("c{label}p{}", i / 2);
            let eye = if i % 2 == 0 { Eye::Left } else { Eye::Right };
            // patients never straddle splits: split boundaries are on even indices
            let pos = i - i % 2;
            let split = if pos < n_val {
                Split::Validation
            } else if pos < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
            let rel = format!("images/class{label}/{patient}_{}.png", eye.as_str());
            let img = synthetic_image(label, spec.edge, &mut rng);
            crate::imaging::save_png(&img, dir.join(&rel)).map_err(|e| DatasetError::Invalid(e.to_string()))?;
            samples.push(SampleRecord::new(rel, label, split).with_patient(patient, Some(eye)));
        }
    }
    let class_names = (0..spec.num_classes).map(|c| format!("class{c}")).collect();
    let manifest = DatasetManifest::new(&spec.task_name, class_names, samples)?;
    write_manifest(&manifest, dir.join("manifest.tsv"))?;
    Ok(manifest)
}
