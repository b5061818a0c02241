//! Latent visual reasoning lab.
//!
//! A tiny vision-language transformer that can switch from emitting text
//! tokens into a latent mode where its own final hidden states are fed back
//! as inputs, trained to reconstruct the visual tokens of a region of
//! interest and then refined with group-relative policy optimization that
//! replays the recorded latent states.

pub mod error;
pub mod numerics;

pub use error::{LvrError, Result};
pub mod model;
pub mod data;
pub mod decode;
pub mod sft;
pub mod grpo;
pub mod config;
pub mod checks;
