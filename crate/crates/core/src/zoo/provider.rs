//! Pretrained weight provider: `<root>/<slug>.safetensors`, where the root is
//! a local directory or an http(s) URL. Tensor names follow the torchvision
//! state-dict keys.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};

use super::{ModelError, Result};

pub const PROVIDER_ENV: &str = "MODEL_PROVIDER_DIR";

pub(super) fn fetch(root: &str, slug: &str) -> Result<HashMap<String, Tensor>> {
    let unavailable = |m: String| ModelError::ProviderUnavailable(m);
    let file = format!("{slug}.safetensors");
    if root.starts_with("http://") || root.starts_with("https://") {
        let url = format!("{}/{file}", root.trim_end_matches('/'));
        let mut resp = ureq::get(&url).call().map_err(|e| unavailable(format!("{url}: {e}")))?;
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_vec()
            .map_err(|e| unavailable(format!("{url}: {e}")))?;
        candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
            .map_err(|e| ModelError::IncompatibleWeights(format!("{url}: {e}")))
    } else {
        let path = Path::new(root).join(&file);
        if !path.is_file() {
            return Err(unavailable(format!("{} does not exist", path.display())));
        }
        candle_core::safetensors::load(&path, &Device::Cpu)
            .map_err(|e| ModelError::IncompatibleWeights(format!("{}: {e}", path.display())))
    }
}
