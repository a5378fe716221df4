//! Fundus preprocessing and the augmentation/normalization transforms that
//! feed the trainer.
//!
//! Images travel through the pipeline as [`Rgb32FImage`] with intensities in
//! `[0, 1]`; grayscale inputs (OCT) are replicated to three channels on load.

mod graham;
mod transform;

use std::path::Path;

pub use image::Rgb32FImage;
use image::{DynamicImage, ImageError};
use thiserror::Error;

pub use graham::{estimate_fundus_radius, graham_preprocess, rescale_to_radius, GrahamParams};
pub use transform::{
    apply_transform, NormalizedImage, Phase, TransformSpec, IMAGENET_MEAN, IMAGENET_STD,
};

/// Largest representable intensity in the pipeline's float images.
pub const MAX_INTENSITY: f32 = 1.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no fundus detected: the central row is uniformly dark")]
    NoFundusDetected,
    #[error("image has no pixels")]
    EmptyImage,
    #[error("invalid preprocessing parameters: {0}")]
    InvalidParams(String),
    #[error("invalid transform spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Decodes a JPEG/PNG file into a three-channel float image.
pub fn load_image(path: impl AsRef<Path>) -> Result<Rgb32FImage> {
    Ok(image::open(path)?.into_rgb32f())
}

/// Writes an image as 8-bit PNG.
pub fn save_png(img: &Rgb32FImage, path: impl AsRef<Path>) -> Result<()> {
    DynamicImage::ImageRgb32F(img.clone()).to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
