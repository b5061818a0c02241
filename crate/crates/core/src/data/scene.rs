use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// RGB values of the palette, aligned with `vocab::COLOR_NAMES`.
pub const PALETTE: [[f32; 3]; 12] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 1.0, 1.0],
    [0.0, 0.0, 0.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
    [0.5, 0.5, 0.5],
    [0.5, 0.25, 0.0],
];

/// A grid of constant-color cells, one patch each, plus per-pixel noise.
/// Pixels are regenerated from `noise_seed` on demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_size: usize,
    /// Palette index per cell, row-major.
    pub colors: Vec<usize>,
    pub noise_std: f32,
    pub noise_seed: u64,
}

impl SyntheticScene {
    pub fn random(rng: &mut ChaCha8Rng, grid_rows: usize, grid_cols: usize, patch_size: usize, n_colors: usize, noise_std: f32) -> Self {
        let colors = (0..grid_rows * grid_cols).map(|_| rng.gen_range(0..n_colors)).collect();
        SyntheticScene { grid_rows, grid_cols, patch_size, colors, noise_std, noise_seed: rng.gen() }
    }

    pub fn height(&self) -> usize {
        self.grid_rows * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.grid_cols * self.patch_size
    }

    pub fn color_at(&self, row: usize, col: usize) -> usize {
        self.colors[row * self.grid_cols + col]
    }

    /// [3 × H × W] image.
    pub fn render(&self) -> Vec<f32> {
        let (h, w, p) = (self.height(), self.width(), self.patch_size);
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let noise = Normal::new(0.0f32, self.noise_std.max(0.0)).expect("valid std");
        let mut img = vec![0.0f32; 3 * h * w];
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let base = PALETTE[self.color_at(y / p, x / p)][ch];
                    let n = if self.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    img[ch * h * w + y * w + x] = base + n;
                }
            }
        }
        img
    }
}

/// Palette index nearest to the mean RGB of cell (row, col) of a rendered image.
pub fn decode_cell_color(image: &[f32], height: usize, width: usize, patch: usize, row: usize, col: usize, n_colors: usize) -> usize {
    let mut mean = [0.0f32; 3];
    for (ch, m) in mean.iter_mut().enumerate() {
        let mut acc = 0.0;
        for y in row * patch..(row + 1) * patch {
            for x in col * patch..(col + 1) * patch {
                acc += image[ch * height * width + y * width + x];
            }
        }
        *m = acc / (patch * patch) as f32;
    }
    (0..n_colors)
        .min_by(|&a, &b| {
            let da: f32 = (0..3).map(|c| (PALETTE[a][c] - mean[c]).powi(2)).sum();
            let db: f32 = (0..3).map(|c| (PALETTE[b][c] - mean[c]).powi(2)).sum();
            da.total_cmp(&db)
        })
        .expect("n_colors > 0")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_dimensions_and_majority_color() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = SyntheticScene::random(&mut rng, 4, 3, 28, 8, 0.02);
        let img = s.render();
        assert_eq!(img.len(), 3 * 112 * 84);
        for r in 0..4 {
            for c in 0..3 {
                assert_eq!(decode_cell_color(&img, 112, 84, 28, r, c, 8), s.color_at(r, c));
            }
        }
        assert_eq!(img, s.render());
    }
}
