//! Optimization loops for both sub-models: batching, teacher forcing,
//! Adam, validation-based model selection, and checkpointing.

mod loop_impl;

pub use loop_impl::{
    resolve_order, train, train_bbox, train_count, EpochStats, SplitId, TrainReport, TrainedModel,
};

use serde::{Deserialize, Serialize};

use crate::countvae::CountCondition;
use crate::layout::OrderingPolicy;
use crate::{Error, Result};

/// Which parts of the conditioning input a model is allowed to see.
/// History is the running record of earlier autoregressive steps; context
/// is the label-set summary. The current-label one-hot is always kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_history: bool,
    pub use_context: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_history: true,
            use_context: true,
        }
    }
}

impl AblationFlags {
    pub fn full() -> Self {
        Self::default()
    }

    /// Applies the flags to a count-step condition.
    pub fn apply_count(&self, cond: &CountCondition) -> CountCondition {
        let mut out = cond.clone();
        if !self.use_history {
            out.prev_counts.iter_mut().for_each(|v| *v = 0.0);
        }
        if !self.use_context {
            out.label_set.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    /// Applies the flags to a box-step condition.
    pub fn apply_bbox(
        &self,
        cond: &crate::bboxvae::BBoxCondition,
    ) -> crate::bboxvae::BBoxCondition {
        let mut out = cond.clone();
        if !self.use_history {
            out.prev_boxes.clear();
        }
        if !self.use_context {
            out.label_counts.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }
}

/// Which sub-model a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Count,
    BBox,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "count" => Ok(Self::Count),
            "bbox" => Ok(Self::BBox),
            other => Err(Error::Schema(format!(
                "unknown model kind {other:?} (expected count or bbox)"
            ))),
        }
    }
}

/// Full training configuration. Defaults reproduce the published setup:
/// CountVAE 50 epochs at lr 1e-5, BBoxVAE 150 epochs at lr 1e-4, batch
/// size 32, latent dimension 32.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub ordering: OrderingPolicy,
    pub ablation: AblationFlags,
    pub seed: u64,
    /// Worker threads for per-example gradients within a batch (merged in
    /// a fixed order, so results are reproducible for a given value).
    pub threads: usize,
}

impl TrainConfig {
    pub fn count_defaults() -> Self {
        Self {
            model_kind: ModelKind::Count,
            lr: 1e-5,
            epochs: 50,
            batch_size: 32,
            latent_dim: 32,
            hidden: 128,
            ordering: OrderingPolicy::ThingsFirst,
            ablation: AblationFlags::default(),
            seed: 1,
            threads: 1,
        }
    }

    pub fn bbox_defaults() -> Self {
        Self {
            model_kind: ModelKind::BBox,
            lr: 1e-4,
            epochs: 150,
            ..Self::count_defaults()
        }
    }

    pub fn defaults_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Count => Self::count_defaults(),
            ModelKind::BBox => Self::bbox_defaults(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Schema("learning rate must be positive".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Schema("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Schema("batch size must be >= 1".into()));
        }
        if self.latent_dim < 1 || self.hidden < 1 {
            return Err(Error::Schema("model sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Splitmix-style stream derivation so every (purpose, index) pair gets an
/// independent deterministic seed.
pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        state ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        state = state.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        state ^= state >> 27;
        state = state.wrapping_mul(0x94d0_49bb_1331_11eb);
        state ^= state >> 31;
    }
    state
}

/// Rng stream salts, one per purpose.
pub(crate) mod salt {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const STEP_NOISE: u64 = 3;
    pub const VALIDATION: u64 = 4;
    pub const RANDOM_ORDER: u64 = 5;
}
