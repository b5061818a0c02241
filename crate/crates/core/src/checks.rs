//! End-to-end finite-difference checks of the SFT and GRPO objectives.
//!
//! Both run in f64 at a generic point: the initialized weights plus
//! N(0, `perturb_std`) on every trainable entry. At the raw initialization
//! many gradient entries sit near 1e-9, below what central differences can
//! resolve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{generate_dataset, pack_batches, prompt_elements, DataConfig, Split};
use crate::decode::{DecodeConfig, StopStrategy};
use crate::error::{LvrError, Result};
use crate::grpo::{grpo_loss, replay_logprobs_tape, rollout_group, RlConfig, SurrogateInputs};
use crate::model::{MixedElement, ModelConfig, ModelWeights, Vocab};
use crate::numerics::{finite_diff_check_with, GradCheckReport, Stencil, Tape};
use crate::sft::{assemble_split, collect_grads, joint_loss, loss_and_grads, SftConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub perturb_std: f64,
    /// Check every `stride`-th entry of each parameter.
    pub stride: usize,
    pub seed: u64,
    /// Instances (SFT) or rollouts (RL) in the checked batch.
    pub n: usize,
    pub stencil: Stencil,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 3e-3, perturb_std: 0.1, stride: 1, seed: 5, n: 3, stencil: Stencil::Central4 }
    }
}

fn generic_point(model: &ModelConfig, vocab: Vocab, opts: &GradCheckOptions, anchor: bool) -> Result<(ModelWeights<f32>, ModelWeights<f64>)> {
    let mut w32 = ModelWeights::<f32>::init(model, vocab)?;
    w32.set_anchor_trainable(anchor);
    let mut w = w32.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let noise = Normal::new(0.0, opts.perturb_std).map_err(|e| LvrError::Config(e.to_string()))?;
    for p in w.params.iter_mut().filter(|p| p.trainable) {
        p.tensor.data.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
    }
    Ok((w32, w))
}

/// Gradient of the joint supervised loss on a small generated batch.
pub fn sft_grad_check(model: &ModelConfig, data: &DataConfig, sft: &SftConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let vocab = Vocab::new(data.n_colors, model.vocab_size)?;
    let ds = generate_dataset(data, &vocab, opts.seed, opts.n.max(1) * 4)?;
    let (w32, mut w) = generic_point(model, vocab, opts, sft.latent_end_target)?;
    let tokens = ds.encode(&w32.encoder)?;
    let (_, seqs, _) = assemble_split(&w32, &ds, &tokens, Split::Train, sft)?;
    let seqs: Vec<_> = seqs.iter().take(opts.n.max(1)).map(|s| s.cast::<f64>()).collect();
    let batch = pack_batches(seqs, usize::MAX)?.remove(0);
    let lw = sft.loss_weights();
    let mut params = w.params.clone();
    finite_diff_check_with(
        &mut params,
        |p, want_grad| {
            w.params = p.to_vec();
            if want_grad {
                let (b, g) = loss_and_grads(&w, &batch, &lw)?;
                return Ok((b.l_total, g));
            }
            let mut tape = Tape::new();
            let vars = w.bind(&mut tape);
            let (_, b) = joint_loss(&mut tape, &w, &vars, &batch, &lw)?;
            Ok((b.l_total, Vec::new()))
        },
        opts.eps,
        opts.stride,
        opts.stencil,
    )
}

/// Gradient of the clipped surrogate with KL on a toy group of `opts.n`
/// sampled rollouts, with old and reference log-probs moved off the policy
/// so ratios and the KL term are non-trivial.
pub fn rl_grad_check(model: &ModelConfig, data: &DataConfig, rl: &RlConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let vocab = Vocab::new(data.n_colors, model.vocab_size)?;
    let ds = generate_dataset(data, &vocab, opts.seed, 4)?;
    let (_, mut w) = generic_point(model, vocab, opts, false)?;
    let tokens = ds.encode(&w.encoder)?;
    let inst = ds.split(Split::Train).first().copied().ok_or_else(|| LvrError::Contract("empty training split".into()))?;
    let prompt: Vec<MixedElement<f64>> = prompt_elements(inst, &tokens[inst.image]);
    let cfg = RlConfig { group_size: opts.n.max(2), ..rl.clone() };
    let decode = DecodeConfig {
        strategy: StopStrategy::FixedToken { k: 2 },
        max_new_tokens: 8,
        temperature: 1.0,
        greedy: false,
        ..DecodeConfig::default()
    };
    // prefer a group in which some rollout enters latent mode
    let mut group = None;
    for s in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (s << 8));
        let g = rollout_group(&w, inst.id, &prompt, &inst.answer, &decode, &cfg, &mut rng)?;
        let usable = g.records.iter().all(|r| !r.old_logprobs.is_empty());
        let latent = g.records.iter().any(|r| !r.trace.segments.is_empty());
        if usable && (latent || group.is_none()) {
            group = Some(g);
            if latent {
                break;
            }
        }
    }
    let mut g = group.ok_or_else(|| LvrError::Contract("no usable rollout group".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for r in g.records.iter_mut() {
        r.ref_logprobs = Some(r.old_logprobs.iter().map(|x| x + rng.gen_range(-0.3..0.3)).collect());
        r.old_logprobs.iter_mut().for_each(|x| *x += rng.gen_range(-0.1..0.1));
    }
    g.advantages = (0..g.records.len()).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let inp = SurrogateInputs::from_groups(std::slice::from_ref(&g))?;
    let mut params = w.params.clone();
    finite_diff_check_with(
        &mut params,
        |p, want_grad| {
            w.params = p.to_vec();
            let mut tape = Tape::new();
            let vars = w.bind(&mut tape);
            let recs: Vec<_> = g.records.iter().collect();
            let lp = replay_logprobs_tape(&mut tape, &w, &vars, &recs)?;
            let l = grpo_loss(&mut tape, lp, &inp, cfg.clip_eps, cfg.beta)?;
            let v = tape.value(l).item();
            if !want_grad {
                return Ok((v, Vec::new()));
            }
            tape.backward(l)?;
            Ok((v, collect_grads(&tape, &w, &vars)))
        },
        opts.eps,
        opts.stride,
        opts.stencil,
    )
}
