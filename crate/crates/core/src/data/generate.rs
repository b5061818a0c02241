use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::roi::BBox;
use super::scene::SyntheticScene;
use super::{Dataset, ImageData, SftInstance, Split, StoredImage, TaskKind};
use crate::error::{LvrError, Result};
use crate::model::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_size: usize,
    pub n_colors: usize,
    pub noise_std: f32,
    /// Fraction of questions that ask for the color of one cell; the rest count
    /// a color inside a sub-grid.
    pub color_question_fraction: f64,
    pub max_region_rows: usize,
    pub max_region_cols: usize,
    pub questions_per_scene: usize,
    pub heldout_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            grid_rows: 4,
            grid_cols: 4,
            patch_size: 28,
            n_colors: 8,
            noise_std: 0.02,
            color_question_fraction: 0.5,
            max_region_rows: 2,
            max_region_cols: 2,
            questions_per_scene: 4,
            heldout_fraction: 0.1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_rows == 0 || self.grid_cols == 0 || self.patch_size == 0 || self.questions_per_scene == 0 {
            return Err(LvrError::Config("grid, patch size and questions_per_scene must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.color_question_fraction) || !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(LvrError::Config("fractions must lie in [0, 1]".into()));
        }
        if self.max_region_rows == 0 || self.max_region_cols == 0 {
            return Err(LvrError::Config("region limits must be positive".into()));
        }
        Ok(())
    }
}

/// Scene seed stream for one split; train and held-out streams never share a seed.
pub fn scene_seed(seed: u64, split: Split, scene: u64) -> u64 {
    let tag = match split {
        Split::Train => 0u64,
        Split::HeldOut => 1u64,
    };
    // splitmix64 over (seed, scene), low bit carries the split tag
    let mut z = seed.wrapping_add(scene.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z & !1) | tag
}

fn question(
    rng: &mut ChaCha8Rng,
    scene: &SyntheticScene,
    cfg: &DataConfig,
    vocab: &Vocab,
) -> Result<(TaskKind, Vec<u32>, BBox, Vec<u32>)> {
    let p = cfg.patch_size;
    let w = |s: &str| vocab.require(s);
    if rng.gen_bool(cfg.color_question_fraction) {
        let (r, c) = (rng.gen_range(0..cfg.grid_rows), rng.gen_range(0..cfg.grid_cols));
        let q = vec![w("what")?, w("color")?, w("row")?, vocab.digit(r)?, w("col")?, vocab.digit(c)?, w("?")?];
        let bbox = BBox::new(c * p, r * p, (c + 1) * p, (r + 1) * p);
        Ok((TaskKind::ColorAtCell, q, bbox, vec![vocab.color(scene.color_at(r, c))?]))
    } else {
        let hr = rng.gen_range(1..=cfg.max_region_rows.min(cfg.grid_rows));
        let hc = rng.gen_range(1..=cfg.max_region_cols.min(cfg.grid_cols));
        let r0 = rng.gen_range(0..=cfg.grid_rows - hr);
        let c0 = rng.gen_range(0..=cfg.grid_cols - hc);
        let color = rng.gen_range(0..cfg.n_colors);
        let mut count = 0;
        for r in r0..r0 + hr {
            for c in c0..c0 + hc {
                count += usize::from(scene.color_at(r, c) == color);
            }
        }
        let q = vec![
            w("count")?,
            vocab.color(color)?,
            w("rows")?,
            vocab.digit(r0)?,
            vocab.digit(r0 + hr - 1)?,
            w("cols")?,
            vocab.digit(c0)?,
            vocab.digit(c0 + hc - 1)?,
            w("?")?,
        ];
        let bbox = BBox::new(c0 * p, r0 * p, (c0 + hc) * p, (r0 + hr) * p);
        Ok((TaskKind::CountInRegion, q, bbox, vec![vocab.digit(count)?]))
    }
}

/// `n` instances of one split, `questions_per_scene` per scene.
pub fn generate_split(cfg: &DataConfig, vocab: &Vocab, seed: u64, split: Split, n: usize) -> Result<Dataset> {
    cfg.validate()?;
    let mut ds = Dataset::default();
    append_split(&mut ds, cfg, vocab, seed, split, n)?;
    Ok(ds)
}

fn append_split(ds: &mut Dataset, cfg: &DataConfig, vocab: &Vocab, seed: u64, split: Split, n: usize) -> Result<()> {
    let tag = match split {
        Split::Train => "train",
        Split::HeldOut => "heldout",
    };
    let n_scenes = n.div_ceil(cfg.questions_per_scene);
    for s in 0..n_scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed, split, s as u64));
        let scene = SyntheticScene::random(&mut rng, cfg.grid_rows, cfg.grid_cols, cfg.patch_size, cfg.n_colors, cfg.noise_std);
        let image = ds.images.len();
        ds.images.push(StoredImage {
            path: format!("images/{tag}_{s:06}.lvri"),
            shape: [3, scene.height(), scene.width()],
            data: ImageData::Scene(scene),
        });
        let ImageData::Scene(scene) = &ds.images[image].data else { unreachable!() };
        let scene = scene.clone();
        for _ in 0..cfg.questions_per_scene.min(n - s * cfg.questions_per_scene) {
            let (task, question, bbox, answer) = question(&mut rng, &scene, cfg, vocab)?;
            ds.instances.push(SftInstance { id: ds.instances.len(), image, task, question, bbox, answer, split });
        }
    }
    Ok(())
}

/// Train and held-out instances, the held-out share set by `heldout_fraction`.
pub fn generate_dataset(cfg: &DataConfig, vocab: &Vocab, seed: u64, n: usize) -> Result<Dataset> {
    cfg.validate()?;
    let n_held = ((n as f64) * cfg.heldout_fraction).round() as usize;
    let mut ds = Dataset::default();
    append_split(&mut ds, cfg, vocab, seed, Split::Train, n - n_held)?;
    append_split(&mut ds, cfg, vocab, seed, Split::HeldOut, n_held)?;
    Ok(ds)
}
