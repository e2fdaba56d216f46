//! Slot-based object-centric video encoder with a flow decoder.
//!
//! Slots are conditioned on first-frame boxes so that slot `k` tracks
//! object `k`. After training the encoder is frozen and shared by every
//! prediction model.

mod model;
mod train;

use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

pub use model::{
    attention_slot_sums, flow_to_tensor, frames_to_tensor, masks_to_segmentation, Decoded,
    EncodedFrame, EncoderConfig, Savi,
};
pub use train::{evaluate_flow_loss, flow_loss, train_savi, FlowWindows, SaviTrainReport};

use crate::error::{Error, Result};
use crate::optim::OptimConfig;
use crate::params::ParamStore;

pub const PARAMS_FILE: &str = "savi.safetensors";
pub const META_FILE: &str = "savi.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaviCheckpointMeta {
    pub kind: String,
    pub config: EncoderConfig,
    pub optim: Option<OptimConfig>,
    pub param_hash: String,
    pub num_params: usize,
    pub steps: usize,
    pub best_val_loss: Option<f64>,
}

/// Writes parameters and a JSON sidecar echoing config and training state.
pub fn save_checkpoint(
    model: &Savi,
    optim: Option<&OptimConfig>,
    report: Option<&SaviTrainReport>,
    dir: &Path,
) -> Result<SaviCheckpointMeta> {
    std::fs::create_dir_all(dir)?;
    model.store().save(dir.join(PARAMS_FILE))?;
    let meta = SaviCheckpointMeta {
        kind: "savi".into(),
        config: model.config().clone(),
        optim: optim.cloned(),
        param_hash: model.store().hash()?,
        num_params: model.store().num_params(),
        steps: report.map_or(0, |r| r.steps),
        best_val_loss: report.map(|r| r.best_val_loss),
    };
    let json = serde_json::to_vec_pretty(&meta)?;
    crate::scene::dataset::write_atomic(&dir.join(META_FILE), &json)?;
    Ok(meta)
}

pub fn read_checkpoint_meta(dir: &Path) -> Result<SaviCheckpointMeta> {
    let meta: SaviCheckpointMeta = serde_json::from_slice(&std::fs::read(dir.join(META_FILE))?)?;
    if meta.kind != "savi" {
        return Err(Error::Config(format!(
            "{} is a `{}` checkpoint, not an encoder",
            dir.display(),
            meta.kind
        )));
    }
    Ok(meta)
}

/// Loads an encoder checkpoint as a frozen model and checks its hash.
pub fn load_frozen(dir: &Path, device: &Device) -> Result<Savi> {
    let meta = read_checkpoint_meta(dir)?;
    let store = ParamStore::load(dir.join(PARAMS_FILE), true, device)?;
    let hash = store.hash()?;
    if hash != meta.param_hash {
        return Err(Error::Config(format!(
            "encoder parameters in {} hash to {hash}, sidecar records {}",
            dir.display(),
            meta.param_hash
        )));
    }
    Savi::new(meta.config, store, device)
}
