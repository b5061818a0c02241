//! Joint supervised objective (next-token, latent reconstruction and the
//! optional mode-switching term) and the SFT training loop.

mod loss;
mod train;

pub use loss::{collect_grads, forward_batch, joint_loss, loss_and_grads, lvr_loss, mode_switch_loss, ntp_loss, LossBreakdown, LossWeights};
pub use train::{assemble_split, train_sft, SftOutputs, SftReport, StepRecord};

use serde::{Deserialize, Serialize};

use crate::error::{LvrError, Result};
use crate::numerics::AdamWConfig;

/// What enters the model at latent input positions during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedMode {
    /// Ground-truth ROI visual tokens.
    TeacherForced,
    /// The model's own LVR-head outputs from the preceding position.
    SelfFed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub lambda_lvr: f64,
    pub lambda_switch: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    /// Capacity of one packed batch, in positions.
    pub l_max: usize,
    pub seed: u64,
    pub feed: FeedMode,
    /// Drop the latent block entirely (plain question→answer sequences).
    pub plain: bool,
    /// Supervise toward the trainable latent-end anchor after the last ROI token.
    pub latent_end_target: bool,
    /// Held-out evaluation interval in steps; 0 disables.
    pub eval_every: usize,
    pub eval_size: usize,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            lambda_lvr: 1.0,
            lambda_switch: 0.0,
            lr: 1e-5,
            weight_decay: 0.0,
            warmup_steps: 0,
            steps: 2000,
            l_max: 256,
            seed: 0,
            feed: FeedMode::TeacherForced,
            plain: false,
            latent_end_target: false,
            eval_every: 0,
            eval_size: 512,
            checkpoint_every: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lvr >= 0.0) || !(self.lambda_switch >= 0.0) {
            return Err(LvrError::Config("lambda_lvr and lambda_switch must be non-negative".into()));
        }
        if !(self.lr > 0.0) || self.l_max == 0 {
            return Err(LvrError::Config("lr and l_max must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda_lvr: self.lambda_lvr, lambda_switch: self.lambda_switch, feed: self.feed }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}
