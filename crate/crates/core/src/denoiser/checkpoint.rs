use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{make_schedule, ModelBundle, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "model.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the parameter blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: ModelConfig,
    pub schedule: ScheduleParams,
    pub control_enabled: bool,
    pub lora_enabled: bool,
    pub completed_stage: Option<u8>,
    pub params: Vec<ParamEntry>,
}

/// Writes `model.json` and `params.bin` (little-endian f32) into `dir`.
pub fn save_bundle(bundle: &ModelBundle<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(bundle.params.len());
    let mut blob = Vec::with_capacity(bundle.params.total_elements() * 4);
    let mut offset = 0;
    for (_, p) in bundle.params.iter() {
        entries.push(ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset });
        offset += p.value.len();
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config: bundle.config.clone(),
        schedule: ScheduleParams {
            steps: bundle.schedule.steps,
            beta_start: bundle.schedule.beta_start,
            beta_end: bundle.schedule.beta_end,
        },
        control_enabled: bundle.control_enabled,
        lora_enabled: bundle.lora_enabled,
        completed_stage: bundle.completed_stage,
        params: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(PARAMS_FILE);
    fs::write(&path, blob).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", m.version)));
    }
    Ok(m)
}

/// Rebuilds the bundle from its config snapshot and fills in the stored
/// values. Any disagreement in names, shapes or blob length is an error.
pub fn load_bundle(dir: &Path) -> Result<ModelBundle<f32>> {
    let m = read_manifest(dir)?;
    let schedule = make_schedule(m.schedule.steps, m.schedule.beta_start, m.schedule.beta_end)?;
    let mut bundle = ModelBundle::with_schedule(m.config.clone(), schedule, 0)?;
    let path = dir.join(PARAMS_FILE);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = bundle.params.total_elements() * 4;
    if blob.len() != expected {
        return Err(Error::Checkpoint(format!("{}: {} bytes, expected {expected}", path.display(), blob.len())));
    }
    if m.params.len() != bundle.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint lists {} parameters, config builds {}",
            m.params.len(),
            bundle.params.len()
        )));
    }
    let ids: Vec<_> = bundle.params.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
    let mut offset = 0;
    for ((id, name, shape), entry) in ids.into_iter().zip(&m.params) {
        if entry.name != name || entry.shape != shape || entry.offset != offset {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` {:?} at {} does not match `{name}` {shape:?} at {offset}",
                entry.name, entry.shape, entry.offset
            )));
        }
        let len: usize = shape.iter().product();
        let data = blob[offset * 4..(offset + len) * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        bundle.params.set_value(id, crate::tensor::Tensor::from_vec(&shape, data)?)?;
        offset += len;
    }
    bundle.control_enabled = m.control_enabled;
    bundle.lora_enabled = m.lora_enabled;
    bundle.completed_stage = m.completed_stage;
    Ok(bundle)
}
