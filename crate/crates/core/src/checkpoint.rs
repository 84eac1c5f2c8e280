//! Versioned JSON checkpoints.
//!
//! A checkpoint captures everything a resumed run needs to continue
//! bit-exactly: model (including exact-zero gates), optimizer accumulators,
//! training position, config, and the RNG state. JSON numbers are written in
//! shortest round-trip form, so every `f64` — zeros included — survives a
//! save/load cycle with identical bits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerAdapter, TinyModel};
use crate::numerics::SeededRng;
use crate::train::{OptimizerState, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Format tag: whether any module has been pruned (inference-only) or the
/// model is still fully trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Full,
    Pruned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: CheckpointKind,
    pub config: TrainConfig,
    pub model: TinyModel,
    pub optimizer: OptimizerState,
    pub rng: SeededRng,
    /// Completed epochs at save time.
    pub epoch: usize,
    /// Completed optimizer steps at save time.
    pub step: u64,
}

fn kind_of(model: &TinyModel) -> CheckpointKind {
    if model
        .layers()
        .iter()
        .any(|l| matches!(l.adapter, LayerAdapter::Pruned { .. }))
    {
        CheckpointKind::Pruned
    } else {
        CheckpointKind::Full
    }
}

impl Checkpoint {
    pub fn new(
        config: TrainConfig,
        model: TinyModel,
        optimizer: OptimizerState,
        rng: SeededRng,
        epoch: usize,
        step: u64,
    ) -> Self {
        let kind = kind_of(&model);
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind,
            config,
            model,
            optimizer,
            rng,
            epoch,
            step,
        }
    }

    /// Canonical serialized form; identical states yield identical bytes.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint version {} (this build reads version {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        if ckpt.kind != kind_of(&ckpt.model) {
            return Err(Error::InvalidConfig(
                "checkpoint kind tag does not match module contents".into(),
            ));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::experiment::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
