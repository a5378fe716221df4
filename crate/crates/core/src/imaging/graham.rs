use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result, Rgb32FImage, MAX_INTENSITY};

/// Fraction of the central row's peak intensity a pixel must exceed to count
/// as part of the fundus.
const RADIUS_THRESHOLD: f32 = 0.1;
const CONTRAST_GAIN: f32 = 4.0;
/// Gaussian kernels are truncated at this many standard deviations.
const KERNEL_SIGMAS: f32 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrahamParams {
    /// Fundus radius after rescaling, in pixels.
    pub target_radius: u32,
    /// Intensity the local average is mapped to, as a fraction of the maximum.
    pub target_gray: f32,
    /// Radius of the circular mask relative to `target_radius`.
    pub clip_fraction: f32,
    /// Gaussian standard deviation relative to `target_radius`.
    pub blur_scale: f32,
}

impl Default for GrahamParams {
    fn default() -> Self {
        Self { target_radius: 500, target_gray: 0.5, clip_fraction: 0.9, blur_scale: 0.1 }
    }
}

impl GrahamParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::InvalidParams(m));
        if self.target_radius < 16 {
            return bad(format!("target_radius {} < 16", self.target_radius));
        }
        if !(self.clip_fraction > 0.0 && self.clip_fraction <= 1.0) {
            return bad(format!("clip_fraction {} outside (0, 1]", self.clip_fraction));
        }
        if !(0.0..=1.0).contains(&self.target_gray) {
            return bad(format!("target_gray {} outside [0, 1]", self.target_gray));
        }
        if !(self.blur_scale > 0.0) {
            return bad(format!("blur_scale {} must be positive", self.blur_scale));
        }
        Ok(())
    }

    /// Edge of the square output image.
    pub fn output_edge(&self) -> u32 {
        (2.0 * self.clip_fraction as f64 * self.target_radius as f64).round() as u32
    }

    pub fn blur_sigma(&self) -> f32 {
        self.blur_scale * self.target_radius as f32
    }
}

/// Estimates the fundus radius from the central image row: half the number
/// of pixels whose channel sum exceeds 10% of the row maximum. The estimate
/// is clamped to half the shorter image dimension, which handles fundi
/// cropped by the frame.
pub fn estimate_fundus_radius(img: &Rgb32FImage) -> Result<f32> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(PipelineError::EmptyImage);
    }
    let y = h / 2;
    let row: Vec<f32> = (0..w).map(|x| img.get_pixel(x, y).0.iter().sum()).collect();
    let peak = row.iter().copied().fold(0.0f32, f32::max);
    if peak <= f32::EPSILON {
        return Err(PipelineError::NoFundusDetected);
    }
    let threshold = RADIUS_THRESHOLD * peak;
    let bright = row.iter().filter(|&&v| v > threshold).count();
    let radius = bright as f32 / 2.0;
    Ok(radius.min(w.min(h) as f32 / 2.0))
}

/// Uniformly rescales `img` so its estimated fundus radius equals `target_radius`.
pub fn rescale_to_radius(img: &Rgb32FImage, target_radius: u32) -> Result<Rgb32FImage> {
    let radius = estimate_fundus_radius(img)?;
    let scale = target_radius as f64 / radius as f64;
    let (w, h) = img.dimensions();
    let nw = ((w as f64 * scale).round() as u32).max(1);
    let nh = ((h as f64 * scale).round() as u32).max(1);
    if (nw, nh) == (w, h) {
        return Ok(img.clone());
    }
    Ok(imageops::resize(img, nw, nh, FilterType::Triangle))
}

/// Graham's fundus normalization: rescale to a common radius, subtract the
/// Gaussian local average (mapped to `target_gray`), then mask and crop to
/// the inner `clip_fraction` of the disk.
///
/// Pixels outside the source frame are treated as black when blurring. The
/// output is always square with edge [`GrahamParams::output_edge`].
pub fn graham_preprocess(img: &Rgb32FImage, params: &GrahamParams) -> Result<Rgb32FImage> {
    params.validate()?;
    let scaled = rescale_to_radius(img, params.target_radius)?;
    let edge = params.output_edge();
    let sigma = params.blur_sigma();
    let margin = (KERNEL_SIGMAS * sigma).ceil() as i64;
    let work_edge = edge as i64 + 2 * margin;

    // Working window centered on the scaled frame, padded by the kernel reach.
    let (sw, sh) = scaled.dimensions();
    let left = (sw as f64 / 2.0 - edge as f64 / 2.0).round() as i64 - margin;
    let top = (sh as f64 / 2.0 - edge as f64 / 2.0).round() as i64 - margin;
    let mut planes = vec![vec![0.0f32; (work_edge * work_edge) as usize]; 3];
    for wy in 0..work_edge {
        let sy = top + wy;
        if sy < 0 || sy >= sh as i64 {
            continue;
        }
        for wx in 0..work_edge {
            let sx = left + wx;
            if sx < 0 || sx >= sw as i64 {
                continue;
            }
            let px = scaled.get_pixel(sx as u32, sy as u32).0;
            let idx = (wy * work_edge + wx) as usize;
            for c in 0..3 {
                planes[c][idx] = px[c];
            }
        }
    }

    let kernel = gaussian_kernel(sigma, margin as usize);
    let blurred: Vec<Vec<f32>> =
        planes.iter().map(|p| separable_blur(p, work_edge as usize, &kernel)).collect();

    let gray = params.target_gray * MAX_INTENSITY;
    let mask_radius = params.clip_fraction as f64 * params.target_radius as f64;
    let center = edge as f64 / 2.0;
    let out = ImageBuffer::from_fn(edge, edge, |x, y| {
        let dx = x as f64 + 0.5 - center;
        let dy = y as f64 + 0.5 - center;
        if dx * dx + dy * dy > mask_radius * mask_radius {
            return Rgb([0.0, 0.0, 0.0]);
        }
        let idx = ((y as i64 + margin) * work_edge + x as i64 + margin) as usize;
        let mut px = [0.0f32; 3];
        for c in 0..3 {
            let v = CONTRAST_GAIN * (planes[c][idx] - blurred[c][idx]) + gray;
            px[c] = v.clamp(0.0, MAX_INTENSITY);
        }
        Rgb(px)
    });
    Ok(out)
}

fn gaussian_kernel(sigma: f32, radius: usize) -> Vec<f32> {
    let s2 = 2.0 * (sigma as f64).powi(2);
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / s2).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| (v / sum) as f32).collect()
}

/// Zero-padded separable convolution of a square plane.
fn separable_blur(plane: &[f32], edge: usize, kernel: &[f32]) -> Vec<f32> {
    let radius = kernel.len() / 2;
    let mut tmp = vec![0.0f32; plane.len()];
    for y in 0..edge {
        let row = &plane[y * edge..(y + 1) * edge];
        for x in 0..edge {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(edge - 1);
            let mut acc = 0.0f32;
            for sx in lo..=hi {
                acc += row[sx] * kernel[sx + radius - x];
            }
            tmp[y * edge + x] = acc;
        }
    }
    let mut out = vec![0.0f32; plane.len()];
    for y in 0..edge {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(edge - 1);
        let dst = &mut out[y * edge..(y + 1) * edge];
        for sy in lo..=hi {
            let k = kernel[sy + radius - y];
            let src = &tmp[sy * edge..(sy + 1) * edge];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Black frame with a centered disk of constant color.
    pub fn disk_image(w: u32, h: u32, radius: f64, color: [f32; 3]) -> Rgb32FImage {
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        ImageBuffer::from_fn(w, h, |x, y| {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= radius * radius {
                Rgb(color)
            } else {
                Rgb([0.0; 3])
            }
        })
    }

    #[test]
    fn radius_of_centered_disk() {
        let img = disk_image(1000, 1000, 200.0, [0.8, 0.4, 0.2]);
        let r = estimate_fundus_radius(&img).unwrap();
        assert!((r - 200.0).abs() <= 2.0, "r = {r}");
    }

    #[test]
    fn radius_of_frame_cropped_disk_is_clamped() {
        let img = disk_image(1000, 1000, 600.0, [0.5; 3]);
        let r = estimate_fundus_radius(&img).unwrap();
        assert!((r - 500.0).abs() <= 2.0, "r = {r}");
        let wide = disk_image(1000, 600, 450.0, [0.5; 3]);
        assert_eq!(estimate_fundus_radius(&wide).unwrap(), 300.0);
    }

    #[test]
    fn dark_image_has_no_fundus() {
        let img = Rgb32FImage::new(64, 64);
        assert!(matches!(estimate_fundus_radius(&img), Err(PipelineError::NoFundusDetected)));
        assert!(matches!(
            graham_preprocess(&img, &GrahamParams::default()),
            Err(PipelineError::NoFundusDetected)
        ));
        assert!(matches!(estimate_fundus_radius(&Rgb32FImage::new(0, 0)), Err(PipelineError::EmptyImage)));
    }

    #[test]
    fn default_params() {
        let p = GrahamParams::default();
        assert_eq!(p.target_radius, 500);
        assert_eq!(p.output_edge(), 900);
        assert_eq!(p.blur_sigma(), 50.0);
        assert!(GrahamParams { target_radius: 8, ..p }.validate().is_err());
        assert!(GrahamParams { clip_fraction: 0.0, ..p }.validate().is_err());
        assert!(GrahamParams { clip_fraction: 1.0, ..p }.validate().is_ok());
    }

    #[test]
    fn small_radius_preprocess_shapes_and_masks() {
        let p = GrahamParams { target_radius: 40, ..GrahamParams::default() };
        let img = disk_image(120, 100, 30.0, [0.3, 0.6, 0.9]);
        let out = graham_preprocess(&img, &p).unwrap();
        assert_eq!(out.dimensions(), (72, 72));
        // corners fall outside the circular mask
        assert_eq!(out.get_pixel(0, 0).0, [0.0; 3]);
        let c = out.get_pixel(36, 36).0;
        for v in c {
            assert!((v - 0.5).abs() < 0.02, "{c:?}");
        }
    }

    #[test]
    fn kernel_is_normalized() {
        let k = gaussian_kernel(5.0, 15);
        assert_eq!(k.len(), 31);
        assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert!(k[15] > k[14] && k[14] == k[16]);
    }
}
