//! Training checkpoints: weights, optimizer moments, config and RNG state
//! in one weight container.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::BatchCursor;
use crate::error::{Error, Result};
use crate::networks::serialize::Container;
use crate::networks::Networks;

/// Everything besides tensors needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    /// Number of completed training steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub cursor_x: BatchCursor,
    pub cursor_y: BatchCursor,
    pub adam_g_t: u64,
    pub adam_d_t: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub container: Container,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, state: &TrainingState) -> Self {
        let meta = serde_json::json!({
            "contents": "training",
            "network": config.network,
            "train": config,
            "state": state,
        });
        Self {
            container: Container::new(meta),
        }
    }

    fn meta_field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .container
            .meta
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing `{key}` in checkpoint metadata")))?;
        Ok(serde_json::from_value(v)?)
    }

    pub fn state(&self) -> Result<TrainingState> {
        self.meta_field("state")
    }

    pub fn config(&self) -> Result<TrainConfig> {
        self.meta_field("train")
    }

    pub fn step(&self) -> Result<u64> {
        Ok(self.state()?.step)
    }

    pub fn networks(&self, dtype: DType, device: &Device) -> Result<Networks> {
        Networks::from_container(&self.container, dtype, device)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.container.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let container = Container::from_bytes(bytes, device)?;
        let ckpt = Self { container };
        ckpt.state()?;
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.container.write(path)
    }

    pub fn read(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, device)
    }
}

/// `<dir>/step_<k>.ckpt`, zero-padded so names sort by step.
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:08}.ckpt"))
}

/// Steps at which a run of `steps` steps writes checkpoints.
pub fn checkpoint_steps(steps: u64, every: u64) -> Vec<u64> {
    let mut out: Vec<u64> = (1..=steps / every).map(|i| i * every).collect();
    if out.last() != Some(&steps) {
        out.push(steps);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cadence_includes_final_step() {
        assert_eq!(checkpoint_steps(250, 100), vec![100, 200, 250]);
        assert_eq!(checkpoint_steps(200, 100), vec![100, 200]);
        assert_eq!(checkpoint_steps(0, 100), vec![0]);
    }
}
