use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{LvrHeadKind, ModelConfig};
use super::encoder::FrozenVisionEncoder;
use super::vocab::Vocab;
use crate::error::{LvrError, Result};
use crate::numerics::{Param, Real, Tensor};

/// Indices of one transformer block's tensors in the parameter list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    /// Keys carry no bias: it would shift every score of a query equally.
    pub wk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HeadLayout {
    Identity,
    Mlp2 { w1: usize, b1: usize, w2: usize, b2: usize },
    Glu3x { w_gate: usize, w_up: usize, w_down: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockLayout>,
    pub ln_f_g: usize,
    pub ln_f_b: usize,
    pub lm_head: usize,
    pub head: HeadLayout,
    pub latent_end: usize,
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn build_specs(c: &ModelConfig) -> (Vec<Spec>, Layout) {
    let d = c.d_model;
    let resid_std = 0.02 / (2.0 * c.n_layers as f64).sqrt();
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        specs.push(Spec { name, shape, init });
        specs.len() - 1
    };
    let tok_emb = add("tok_emb".into(), vec![c.vocab_size, d], Init::Normal(0.02));
    let pos_emb = add("pos_emb".into(), vec![c.max_seq_len, d], Init::Normal(0.02));
    let mut blocks = Vec::new();
    for l in 0..c.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        blocks.push(BlockLayout {
            ln1_g: add(p("ln1.g"), vec![d], Init::Ones),
            ln1_b: add(p("ln1.b"), vec![d], Init::Zeros),
            wq: add(p("attn.wq"), vec![d, d], Init::Normal(0.02)),
            bq: add(p("attn.bq"), vec![d], Init::Zeros),
            wk: add(p("attn.wk"), vec![d, d], Init::Normal(0.02)),
            wv: add(p("attn.wv"), vec![d, d], Init::Normal(0.02)),
            bv: add(p("attn.bv"), vec![d], Init::Zeros),
            wo: add(p("attn.wo"), vec![d, d], Init::Normal(resid_std)),
            bo: add(p("attn.bo"), vec![d], Init::Zeros),
            ln2_g: add(p("ln2.g"), vec![d], Init::Ones),
            ln2_b: add(p("ln2.b"), vec![d], Init::Zeros),
            w1: add(p("mlp.w1"), vec![d, 4 * d], Init::Normal(0.02)),
            b1: add(p("mlp.b1"), vec![4 * d], Init::Zeros),
            w2: add(p("mlp.w2"), vec![4 * d, d], Init::Normal(resid_std)),
            b2: add(p("mlp.b2"), vec![d], Init::Zeros),
        });
    }
    let ln_f_g = add("ln_f.g".into(), vec![d], Init::Ones);
    let ln_f_b = add("ln_f.b".into(), vec![d], Init::Zeros);
    let lm_head = add("lm_head".into(), vec![d, c.vocab_size], Init::Normal(0.02));
    let head = match c.lvr_head_kind {
        LvrHeadKind::Identity => HeadLayout::Identity,
        LvrHeadKind::Mlp2 => HeadLayout::Mlp2 {
            w1: add("lvr_head.w1".into(), vec![d, d], Init::Normal(0.02)),
            b1: add("lvr_head.b1".into(), vec![d], Init::Zeros),
            w2: add("lvr_head.w2".into(), vec![d, d], Init::Zeros),
            b2: add("lvr_head.b2".into(), vec![d], Init::Zeros),
        },
        LvrHeadKind::Glu3x => HeadLayout::Glu3x {
            w_gate: add("lvr_head.w_gate".into(), vec![d, 3 * d], Init::Normal(0.02)),
            w_up: add("lvr_head.w_up".into(), vec![d, 3 * d], Init::Normal(0.02)),
            w_down: add("lvr_head.w_down".into(), vec![3 * d, d], Init::Zeros),
        },
    };
    let latent_end = add("latent_end".into(), vec![d], Init::Normal(0.02));
    let layout = Layout { tok_emb, pos_emb, blocks, ln_f_g, ln_f_b, lm_head, head, latent_end };
    (specs, layout)
}

/// All model tensors: the trainable transformer, LM head, optional LVR head,
/// the latent-end anchor, and the frozen vision encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<S> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: Vec<Param<S>>,
    pub layout: Layout,
    pub encoder: FrozenVisionEncoder<S>,
}

/// Seed stream for the frozen encoder, kept apart from the trainable init.
pub fn encoder_seed(model_seed: u64) -> u64 {
    model_seed ^ 0x9e37_79b9_7f4a_7c15
}

impl<S: Real> ModelWeights<S> {
    /// Deterministic initialization: N(0, 0.02) weights, residual output
    /// projections scaled by 1/√(2·n_layers), zero-initialized final LVR-head
    /// layer. The latent-end anchor starts frozen.
    pub fn init(config: &ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(LvrError::Config(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let (specs, layout) = build_specs(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = specs
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data: Vec<S> = match s.init {
                    Init::Zeros => vec![S::zero(); n],
                    Init::Ones => vec![S::one(); n],
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("valid std");
                        (0..n).map(|_| S::of(dist.sample(&mut rng))).collect()
                    }
                };
                let trainable = s.name != "latent_end";
                Param { name: s.name, tensor: Tensor::new(s.shape, data).expect("shape"), trainable }
            })
            .collect();
        let encoder = FrozenVisionEncoder::new(config, encoder_seed(config.seed));
        Ok(ModelWeights { config: config.clone(), vocab, params, layout, encoder })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<S> {
        &self.params[idx].tensor
    }

    pub fn data(&self, idx: usize) -> &[S] {
        &self.params[idx].tensor.data
    }

    pub fn set_anchor_trainable(&mut self, trainable: bool) {
        let i = self.layout.latent_end;
        self.params[i].trainable = trainable;
    }

    pub fn latent_end(&self) -> &[S] {
        self.data(self.layout.latent_end)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<T: Real>(&self) -> ModelWeights<T> {
        ModelWeights {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), tensor: p.tensor.cast(), trainable: p.trainable })
                .collect(),
            layout: self.layout.clone(),
            encoder: FrozenVisionEncoder {
                weight: self.encoder.weight.cast(),
                bias: self.encoder.bias.cast(),
                seed: self.encoder.seed,
                patch_size: self.encoder.patch_size,
                channels: self.encoder.channels,
            },
        }
    }

    /// Rebuilds weights from named tensors (checkpoint load).
    pub fn from_named(
        config: &ModelConfig,
        vocab: Vocab,
        named: Vec<(String, Tensor<S>, bool)>,
        encoder_seed: u64,
    ) -> Result<Self> {
        let mut w = Self::init(config, vocab)?;
        w.encoder.seed = encoder_seed;
        let mut seen = vec![false; w.params.len()];
        let (mut enc_w, mut enc_b) = (false, false);
        for (name, tensor, trainable) in named {
            let target: &mut Tensor<S> = match name.as_str() {
                "encoder.weight" => {
                    enc_w = true;
                    &mut w.encoder.weight
                }
                "encoder.bias" => {
                    enc_b = true;
                    &mut w.encoder.bias
                }
                _ => {
                    let i = w
                        .params
                        .iter()
                        .position(|p| p.name == name)
                        .ok_or_else(|| LvrError::format(0, format!("unexpected tensor {name}")))?;
                    seen[i] = true;
                    w.params[i].trainable = trainable;
                    &mut w.params[i].tensor
                }
            };
            if target.shape != tensor.shape {
                return Err(LvrError::format(0, format!("tensor {name}: shape {:?} vs {:?}", tensor.shape, target.shape)));
            }
            target.data = tensor.data;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(LvrError::format(0, format!("missing tensor {}", w.params[i].name)));
        }
        if !(enc_w && enc_b) {
            return Err(LvrError::format(0, "missing encoder tensors"));
        }
        Ok(w)
    }

    /// Named tensors in checkpoint order with their trainable tag.
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor<S>, bool)> {
        let mut out: Vec<(&str, &Tensor<S>, bool)> =
            self.params.iter().map(|p| (p.name.as_str(), &p.tensor, p.trainable)).collect();
        out.push(("encoder.weight", &self.encoder.weight, false));
        out.push(("encoder.bias", &self.encoder.bias, false));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(c: &ModelConfig) -> Vocab {
        Vocab::new(8, c.vocab_size).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig::default();
        let a = ModelWeights::<f32>::init(&c, vocab(&c)).unwrap();
        let b = ModelWeights::<f32>::init(&c, vocab(&c)).unwrap();
        assert_eq!(a, b);
        let c2 = ModelConfig { seed: 1, ..c.clone() };
        assert_ne!(a.params[0], ModelWeights::<f32>::init(&c2, vocab(&c2)).unwrap().params[0]);
    }

    #[test]
    fn residual_projections_are_scaled() {
        let c = ModelConfig { n_layers: 8, d_model: 64, ..ModelConfig::default() };
        let w = ModelWeights::<f64>::init(&c, vocab(&c)).unwrap();
        let std = |i: usize| {
            let d = w.data(i);
            (d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64).sqrt()
        };
        let b = &w.layout.blocks[0];
        assert!((std(b.wq) - 0.02).abs() < 0.002);
        assert!((std(b.wo) - 0.02 / 4.0).abs() < 0.001);
    }

    #[test]
    fn head_final_layers_start_at_zero() {
        for kind in [LvrHeadKind::Mlp2, LvrHeadKind::Glu3x] {
            let c = ModelConfig { lvr_head_kind: kind, ..ModelConfig::default() };
            let w = ModelWeights::<f32>::init(&c, vocab(&c)).unwrap();
            let last = match w.layout.head {
                HeadLayout::Mlp2 { w2, .. } => w2,
                HeadLayout::Glu3x { w_down, .. } => w_down,
                HeadLayout::Identity => unreachable!(),
            };
            assert!(w.data(last).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn vocab_size_mismatch_is_a_config_error() {
        let c = ModelConfig::default();
        assert!(matches!(ModelWeights::<f32>::init(&c, Vocab::new(8, 40).unwrap()), Err(LvrError::Config(_))));
    }
}
