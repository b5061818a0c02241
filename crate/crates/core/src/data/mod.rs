//! Synthetic ROI-grounded VQA data, ROI patch indexing, sequence assembly,
//! packing and the manifest/image file formats.

pub mod assemble;
pub mod generate;
pub mod io;
pub mod pack;
pub mod roi;
pub mod scene;

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

pub use assemble::{assemble_sft_sequence, prompt_elements, AssemblyMode, AssemblyOptions};
pub use generate::{generate_dataset, generate_split, DataConfig};
pub use io::{read_manifest, write_manifest};
pub use pack::{pack_batches, pack_lengths, PackedBatch};
pub use roi::{bbox_to_patch_indices, BBox, PatchIndexList};
pub use scene::SyntheticScene;

use crate::error::Result;
use crate::model::FrozenVisionEncoder;
use crate::numerics::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ColorAtCell,
    CountInRegion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    #[serde(rename = "heldout")]
    HeldOut,
}

/// One supervised example; `image` indexes `Dataset::images`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftInstance {
    pub id: usize,
    pub image: usize,
    pub task: TaskKind,
    pub question: Vec<u32>,
    pub bbox: BBox,
    pub answer: Vec<u32>,
    pub split: Split,
}

/// A `[C×H×W]` float image.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageData {
    /// Rendered on demand.
    Scene(SyntheticScene),
    Raw(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredImage {
    /// Path relative to the manifest directory.
    pub path: String,
    pub shape: [usize; 3],
    pub data: ImageData,
}

impl StoredImage {
    pub fn pixels(&self) -> Cow<'_, [f32]> {
        match &self.data {
            ImageData::Scene(s) => Cow::Owned(s.render()),
            ImageData::Raw(p) => Cow::Borrowed(p),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub instances: Vec<SftInstance>,
    pub images: Vec<StoredImage>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&SftInstance> {
        self.instances.iter().filter(|i| i.split == split).collect()
    }

    pub fn image_shape(&self, inst: &SftInstance) -> [usize; 3] {
        self.images[inst.image].shape
    }

    /// Visual tokens of every image under `encoder`, indexed like `images`.
    pub fn encode<S: Real>(&self, encoder: &FrozenVisionEncoder<S>) -> Result<Vec<Vec<Vec<S>>>> {
        use rayon::prelude::*;
        self.images
            .par_iter()
            .map(|img| {
                let px: Vec<S> = img.pixels().iter().map(|&x| S::of(x as f64)).collect();
                encoder.encode_image(&px, img.shape[1], img.shape[2])
            })
            .collect()
    }
}
