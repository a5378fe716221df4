//! Transfer-learning benchmark harness for retinal image classification:
//! manifests, Graham preprocessing, a model zoo of 16 ImageNet backbones,
//! the SGD training loop, evaluation metrics and rank-based comparisons.

pub mod dataset;
pub mod imaging;
pub mod zoo;
pub mod metrics;
pub mod stats;
pub mod train;
pub mod synthetic;
