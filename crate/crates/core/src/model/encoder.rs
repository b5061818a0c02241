use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{LvrError, Result};
use crate::numerics::{kernels, Real, Tensor};

/// Frozen linear patch embedding standing in for the vision tower and projector.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenVisionEncoder<S> {
    /// [(P·P·C) × d_model]
    pub weight: Tensor<S>,
    /// [d_model]
    pub bias: Tensor<S>,
    pub seed: u64,
    pub patch_size: usize,
    pub channels: usize,
}

impl<S: Real> FrozenVisionEncoder<S> {
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_in = config.patch_dim();
        let d = config.d_model;
        let w = Normal::new(0.0, 1.0 / (n_in as f64).sqrt()).expect("valid std");
        let b = Normal::new(0.0, 0.02).expect("valid std");
        let weight = (0..n_in * d).map(|_| S::of(w.sample(&mut rng))).collect();
        let bias = (0..d).map(|_| S::of(b.sample(&mut rng))).collect();
        FrozenVisionEncoder {
            weight: Tensor::new(vec![n_in, d], weight).expect("shape"),
            bias: Tensor::new(vec![d], bias).expect("shape"),
            seed,
            patch_size: config.patch_size,
            channels: config.image_channels,
        }
    }

    pub fn d_model(&self) -> usize {
        self.bias.len()
    }

    /// Flattens patch (r, c) of a [C×H×W] image as channel, then pixel row,
    /// then pixel column.
    pub fn patch_pixels(image: &[S], c: usize, h: usize, w: usize, p: usize, r: usize, col: usize) -> Vec<S> {
        let mut out = Vec::with_capacity(c * p * p);
        for ch in 0..c {
            for py in 0..p {
                let y = r * p + py;
                let start = ch * h * w + y * w + col * p;
                out.extend_from_slice(&image[start..start + p]);
            }
        }
        out
    }

    /// Encodes a [C×H×W] image into (H/P)·(W/P) visual tokens in row-major
    /// patch order.
    pub fn encode_image(&self, image: &[S], height: usize, width: usize) -> Result<Vec<Vec<S>>> {
        let (c, p) = (self.channels, self.patch_size);
        if image.len() != c * height * width {
            return Err(LvrError::dim("encode_image", format!("{} values for {c}x{height}x{width}", image.len())));
        }
        if height % p != 0 || width % p != 0 {
            return Err(LvrError::dim("encode_image", format!("{height}x{width} not divisible by patch size {p}")));
        }
        let d = self.d_model();
        let n_in = c * p * p;
        let mut tokens = Vec::with_capacity((height / p) * (width / p));
        for r in 0..height / p {
            for col in 0..width / p {
                let px = Self::patch_pixels(image, c, height, width, p, r, col);
                let mut v = self.bias.data.clone();
                kernels::matmul_acc(&px, &self.weight.data, &mut v, 1, n_in, d);
                tokens.push(v);
            }
        }
        Ok(tokens)
    }

    /// Order-sensitive FNV-1a digest over the raw bytes of weight and bias.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in self.weight.data.iter().chain(&self.bias.data) {
            for b in x.f64().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}
