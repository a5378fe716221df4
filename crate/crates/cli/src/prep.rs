//! Corpus ingestion: Graham preprocessing into a cache directory and
//! directory-per-class import.

use std::fs;
use std::path::{Component, Path, PathBuf};

use retina_bench::dataset::{import_class_dirs, resolve_image_path, write_manifest, DatasetManifest, SampleRecord};
use retina_bench::imaging::{graham_preprocess, load_image, save_png, GrahamParams};

use crate::config::hex;
use crate::error::{CliError, Result};

/// Cache subdirectory name for one parameter set.
pub fn params_key(params: &GrahamParams) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(params).expect("params serialize");
    format!("graham-{}", &hex(&Sha256::digest(json))[..12])
}

/// Where the preprocessed copy of `sample` goes, relative to the cache root.
fn cached_path(sample: &SampleRecord) -> PathBuf {
    // keep the manifest layout but drop anything that would escape the cache
    let rel: PathBuf = sample
        .image_path
        .components()
        .filter(|c| matches!(c, Component::Normal(_)))
        .collect();
    rel.with_extension("png")
}

/// Runs Graham preprocessing over every image of `manifest` into `out_dir`
/// and writes `out_dir/manifest.tsv` pointing at the PNG copies. Images that
/// already exist in the cache are not recomputed.
pub fn preprocess_manifest(
    manifest: &DatasetManifest,
    image_root: &Path,
    out_dir: &Path,
    params: &GrahamParams,
) -> Result<DatasetManifest> {
    params.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut samples = Vec::with_capacity(manifest.samples().len());
    for (i, s) in manifest.samples().iter().enumerate() {
        let rel = cached_path(s);
        let dest = out_dir.join(&rel);
        if !dest.exists() {
            let src = resolve_image_path(image_root, s);
            let img = load_image(&src).map_err(|source| CliError::Image { path: src.clone(), source })?;
            let out = graham_preprocess(&img, params).map_err(|source| CliError::Image { path: src.clone(), source })?;
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            // concurrent grid runs may share the cache
            let tmp = dest.with_extension(format!("png.{}.tmp", std::process::id()));
            save_png(&out, &tmp).map_err(|source| CliError::Image { path: dest.clone(), source })?;
            fs::rename(&tmp, &dest)?;
        }
        if (i + 1) % 500 == 0 {
            log::info!("preprocessed {}/{} images", i + 1, manifest.samples().len());
        }
        samples.push(SampleRecord { image_path: rel, ..s.clone() });
    }
    let out = DatasetManifest::new(manifest.task_name(), manifest.class_names().to_vec(), samples)?;
    write_manifest(&out, out_dir.join("manifest.tsv"))?;
    Ok(out)
}

/// Builds a manifest from class directories and writes it to `out`.
pub fn import_dirs(root: &Path, task: &str, classes: Option<&[String]>, out: &Path) -> Result<DatasetManifest> {
    let manifest = import_class_dirs(root, task, classes)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_manifest(&manifest, out)?;
    Ok(manifest)
}
