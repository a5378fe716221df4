use image::imageops::{self, FilterType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result, Rgb32FImage};

/// Per-channel ImageNet statistics used to normalize every phase.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

const CROP_SCALE: (f64, f64) = (0.08, 1.0);
const CROP_RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const CROP_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub phase: Phase,
    /// Shorter-edge resize target (eval phase only).
    pub resize_edge: u32,
    pub crop_edge: u32,
    pub horizontal_flip: bool,
    pub channel_mean: [f32; 3],
    pub channel_std: [f32; 3],
}

impl TransformSpec {
    /// Random resized crop to `crop_edge` plus random horizontal flip.
    pub fn train(crop_edge: u32) -> Self {
        Self {
            phase: Phase::Train,
            resize_edge: crop_edge,
            crop_edge,
            horizontal_flip: true,
            channel_mean: IMAGENET_MEAN,
            channel_std: IMAGENET_STD,
        }
    }

    /// Shorter-edge resize then center crop.
    pub fn eval(resize_edge: u32, crop_edge: u32) -> Self {
        Self {
            phase: Phase::Eval,
            resize_edge,
            crop_edge,
            horizontal_flip: false,
            channel_mean: IMAGENET_MEAN,
            channel_std: IMAGENET_STD,
        }
    }

    /// Eval spec for an architecture input edge, keeping the 256/224 ratio.
    pub fn eval_for_input(input_edge: u32) -> Self {
        let resize = (input_edge as f64 * 256.0 / 224.0).round() as u32;
        Self::eval(resize, input_edge)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::InvalidSpec(m));
        if self.crop_edge == 0 {
            return bad("crop_edge must be positive".into());
        }
        if self.phase == Phase::Eval && self.crop_edge > self.resize_edge {
            return bad(format!("crop_edge {} exceeds resize_edge {}", self.crop_edge, self.resize_edge));
        }
        if let Some(s) = self.channel_std.iter().find(|s| !(**s > 0.0)) {
            return bad(format!("channel std {s} must be positive"));
        }
        Ok(())
    }
}

/// Channels-first, normalized `3 x edge x edge` image ready for a model.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub edge: usize,
    pub data: Vec<f32>,
}

impl NormalizedImage {
    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.edge + y) * self.edge + x]
    }

    pub fn channel(&self, channel: usize) -> &[f32] {
        let n = self.edge * self.edge;
        &self.data[channel * n..(channel + 1) * n]
    }

    /// Reverses normalization for one channel.
    pub fn denormalized(&self, spec: &TransformSpec, channel: usize) -> Vec<f32> {
        self.channel(channel)
            .iter()
            .map(|v| v * spec.channel_std[channel] + spec.channel_mean[channel])
            .collect()
    }
}

/// Applies the phase's geometric transform, then per-channel normalization.
/// Randomness in the train phase is fully determined by `seed`.
pub fn apply_transform(img: &Rgb32FImage, spec: &TransformSpec, seed: u64) -> Result<NormalizedImage> {
    spec.validate()?;
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(PipelineError::EmptyImage);
    }
    let edge = spec.crop_edge;
    let cropped = match spec.phase {
        Phase::Train => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y, cw, ch) = random_resized_crop_box(w, h, &mut rng);
            let region = imageops::crop_imm(img, x, y, cw, ch).to_image();
            let mut out = imageops::resize(&region, edge, edge, FilterType::Triangle);
            if spec.horizontal_flip && rng.random_bool(0.5) {
                imageops::flip_horizontal_in_place(&mut out);
            }
            out
        }
        Phase::Eval => {
            let resized = resize_shorter_edge(img, spec.resize_edge);
            let (rw, rh) = resized.dimensions();
            let cw = edge.min(rw);
            let ch = edge.min(rh);
            let x = ((rw - cw) as f64 / 2.0).round() as u32;
            let y = ((rh - ch) as f64 / 2.0).round() as u32;
            let region = imageops::crop_imm(&resized, x, y, cw, ch).to_image();
            if (cw, ch) == (edge, edge) {
                region
            } else {
                imageops::resize(&region, edge, edge, FilterType::Triangle)
            }
        }
    };

    let edge = edge as usize;
    let plane = edge * edge;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, px) in cropped.enumerate_pixels() {
        let idx = y as usize * edge + x as usize;
        for c in 0..3 {
            data[c * plane + idx] = (px.0[c] - spec.channel_mean[c]) / spec.channel_std[c];
        }
    }
    Ok(NormalizedImage { edge, data })
}

fn resize_shorter_edge(img: &Rgb32FImage, target: u32) -> Rgb32FImage {
    let (w, h) = img.dimensions();
    let (nw, nh) = if w <= h {
        (target, ((target as u64 * h as u64) / w as u64).max(1) as u32)
    } else {
        (((target as u64 * w as u64) / h as u64).max(1) as u32, target)
    };
    if (nw, nh) == (w, h) {
        img.clone()
    } else {
        imageops::resize(img, nw, nh, FilterType::Triangle)
    }
}

/// Area/aspect sampling of a random resized crop; falls back to a central
/// crop clamped to the allowed aspect range.
fn random_resized_crop_box(w: u32, h: u32, rng: &mut ChaCha8Rng) -> (u32, u32, u32, u32) {
    let area = w as f64 * h as f64;
    let (log_lo, log_hi) = (CROP_RATIO.0.ln(), CROP_RATIO.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target_area = area * rng.random_range(CROP_SCALE.0..=CROP_SCALE.1);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let cw = (target_area * aspect).sqrt().round() as u32;
        let ch = (target_area / aspect).sqrt().round() as u32;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let x = rng.random_range(0..=w - cw);
            let y = rng.random_range(0..=h - ch);
            return (x, y, cw, ch);
        }
    }
    let ratio = w as f64 / h as f64;
    let (cw, ch) = if ratio < CROP_RATIO.0 {
        (w, ((w as f64 / CROP_RATIO.0).round() as u32).min(h))
    } else if ratio > CROP_RATIO.1 {
        (((h as f64 * CROP_RATIO.1).round() as u32).min(w), h)
    } else {
        (w, h)
    };
    ((w - cw) / 2, (h - ch) / 2, cw, ch)
}
