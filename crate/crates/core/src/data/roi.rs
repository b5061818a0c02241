use serde::{Deserialize, Serialize};

use crate::error::{LvrError, Result};

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.x0 < self.x1 && self.x1 <= width && self.y0 < self.y1 && self.y1 <= height {
            Ok(())
        } else {
            Err(LvrError::Contract(format!("bbox {self:?} invalid for a {height}x{width} image")))
        }
    }
}

/// Indices into the row-major flattened patch grid, strictly increasing.
pub type PatchIndexList = Vec<usize>;

/// Patches whose pixel square overlaps `bbox` with nonzero area, in row-major
/// order. The covered row and column ranges come from integer division on the
/// box edges; no patch is visited that is not returned.
pub fn bbox_to_patch_indices(bbox: &BBox, height: usize, width: usize, patch: usize) -> Result<PatchIndexList> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(LvrError::dim("bbox_to_patch_indices", format!("{height}x{width} not divisible by {patch}")));
    }
    bbox.validate(height, width)?;
    let grid_cols = width / patch;
    let (c0, c1) = (bbox.x0 / patch, (bbox.x1 - 1) / patch);
    let (r0, r1) = (bbox.y0 / patch, (bbox.y1 - 1) / patch);
    let mut out = Vec::with_capacity((r1 - r0 + 1) * (c1 - c0 + 1));
    for r in r0..=r1 {
        out.extend((c0..=c1).map(|c| r * grid_cols + c));
    }
    Ok(out)
}
