//! Frozen patch encoder, decoder-only transformer over mixed inputs, LM head,
//! optional LVR head, KV-cached inference and checkpoints.

pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod forward;
pub mod sequence;
pub mod vocab;
pub mod weights;

pub use cache::{ForwardOutput, KvCache};
pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint};
pub use config::{LvrHeadKind, ModelConfig};
pub use encoder::FrozenVisionEncoder;
pub use forward::{TapeInput, TapeOutput};
pub use sequence::{LatentTarget, MixedElement, MixedItem, MixedSequence};
pub use vocab::Vocab;
pub use weights::{HeadLayout, Layout, ModelWeights};
