use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LossRecord, SelfCondCache, StageConfig, TrainState};
use crate::denoiser::{load_bundle, save_bundle};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::tensor::Tensor32;

pub const TRAIN_STATE_VERSION: u32 = 1;
const TRAIN_FILE: &str = "train.json";
const OPTIM_FILE: &str = "optim.bin";
const CACHE_FILE: &str = "sc_cache.bin";

/// Extension section written next to the model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub version: u32,
    pub seed: u64,
    pub config: StageConfig,
    pub step: u64,
    pub optimizer_step: u64,
    /// Names of parameters with moment buffers, in `optim.bin` order
    /// (first moment then second, each shaped like the parameter).
    pub moments: Vec<String>,
    pub cache_refreshed_at: Option<u64>,
    pub history: Vec<LossRecord>,
}

fn push_f32(blob: &mut Vec<u8>, t: &Tensor32) {
    for v in t.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

fn take_f32(blob: &[u8], cursor: &mut usize, shape: &[usize], path: &Path) -> Result<Tensor32> {
    let len: usize = shape.iter().product();
    let end = *cursor + len * 4;
    let bytes = blob
        .get(*cursor..end)
        .ok_or_else(|| Error::Checkpoint(format!("{} is truncated", path.display())))?;
    *cursor = end;
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Tensor32::from_vec(shape, data)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl TrainState {
    /// Writes the model checkpoint plus `train.json`, `optim.bin` and, when
    /// present, `sc_cache.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_bundle(&self.bundle, dir)?;
        let mut names = Vec::new();
        let mut blob = Vec::new();
        for (id, m) in self.optimizer.all_moments().iter().enumerate() {
            if let Some((m1, m2)) = m {
                names.push(self.bundle.params.get(id).name.clone());
                push_f32(&mut blob, m1);
                push_f32(&mut blob, m2);
            }
        }
        write(&dir.join(OPTIM_FILE), &blob)?;
        let cache_path = dir.join(CACHE_FILE);
        match &self.cache {
            Some(cache) => {
                let mut blob = Vec::new();
                for f in &cache.frames {
                    push_f32(&mut blob, f);
                }
                write(&cache_path, &blob)?;
            }
            None if cache_path.exists() => fs::remove_file(&cache_path).map_err(|e| Error::io(&cache_path, e))?,
            None => {}
        }
        let manifest = TrainManifest {
            version: TRAIN_STATE_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            step: self.step,
            optimizer_step: self.optimizer.steps_taken(),
            moments: names,
            cache_refreshed_at: self.cache.as_ref().map(|c| c.refreshed_at),
            history: self.history.clone(),
        };
        let path = dir.join(TRAIN_FILE);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        write(&path, text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bundle = load_bundle(dir)?;
        let path = dir.join(TRAIN_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: TrainManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if m.version != TRAIN_STATE_VERSION {
            return Err(Error::Checkpoint(format!("unsupported train state version {}", m.version)));
        }
        m.config.validate()?;
        let expected_done = if m.step >= m.config.steps { Some(m.config.stage) } else { m.config.stage.checked_sub(1) };
        if bundle.completed_stage != expected_done {
            return Err(Error::Checkpoint(format!(
                "model reports completed stage {:?}, train state is stage {} step {}",
                bundle.completed_stage, m.config.stage, m.step
            )));
        }

        let path = dir.join(OPTIM_FILE);
        let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut moments = vec![None; bundle.params.len()];
        let mut cursor = 0;
        for name in &m.moments {
            let id = bundle
                .params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer moments for unknown parameter `{name}`")))?;
            let shape = bundle.params.value(id).shape().to_vec();
            let m1 = take_f32(&blob, &mut cursor, &shape, &path)?;
            let m2 = take_f32(&blob, &mut cursor, &shape, &path)?;
            moments[id] = Some((m1, m2));
        }
        if cursor != blob.len() {
            return Err(Error::Checkpoint(format!("{}: {} trailing bytes", path.display(), blob.len() - cursor)));
        }
        let mut optimizer = AdamW::new(m.config.lr).with_weight_decay(m.config.weight_decay);
        optimizer.restore(m.optimizer_step, moments);

        let cache = match m.cache_refreshed_at {
            Some(refreshed_at) => {
                let path = dir.join(CACHE_FILE);
                let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let (h, w) = (bundle.config.height, bundle.config.width);
                let per = 3 * h * w * 4;
                if blob.is_empty() || blob.len() % per != 0 {
                    return Err(Error::Checkpoint(format!("{}: {} bytes is not a whole number of frames", path.display(), blob.len())));
                }
                let mut cursor = 0;
                let frames = (0..blob.len() / per)
                    .map(|_| take_f32(&blob, &mut cursor, &[3, h, w], &path))
                    .collect::<Result<Vec<_>>>()?;
                Some(SelfCondCache { refreshed_at, frames })
            }
            None => None,
        };
        Self::assemble(bundle, optimizer, m.config, m.seed, m.step, m.history, cache)
    }
}
