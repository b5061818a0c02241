//! Group-relative policy optimization over interleaved responses. Rollouts
//! record the latent vectors they fed; the update pass replays them verbatim
//! so text-token ratios are computed in the exact rollout context.

mod train;

pub use train::{train_rl, RlOutputs, RlReport, RlStepRecord};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{extract_answer, generate, DecodeConfig, DecodeTrace, StopStrategy};
use crate::error::{LvrError, Result};
use crate::model::vocab::{LVR_END, LVR_START};
use crate::model::{MixedElement, ModelWeights, TapeInput};
use crate::numerics::{Real, RowSrc, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub group_size: usize,
    pub temperature: f64,
    pub beta: f64,
    pub clip_eps: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// Prompt groups collected per iteration.
    pub prompts_per_iter: usize,
    /// Gradient steps per collected batch.
    pub updates_per_iter: usize,
    pub reward_format: f64,
    pub reward_accuracy: f64,
    /// Rollout decoding; its temperature and greedy flag are overridden.
    pub decode: DecodeConfig,
    /// With a FixedToken strategy, use K = number of ROI patches per prompt.
    pub roi_budget: bool,
    pub seed: u64,
    /// Held-out evaluation interval in iterations; 0 evaluates only at the ends.
    pub eval_every: usize,
    pub eval_size: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            group_size: 8,
            temperature: 0.9,
            beta: 0.04,
            clip_eps: 0.2,
            lr: 1e-5,
            weight_decay: 0.0,
            iterations: 200,
            prompts_per_iter: 8,
            updates_per_iter: 1,
            reward_format: 1.0,
            reward_accuracy: 1.0,
            decode: DecodeConfig { strategy: StopStrategy::FixedToken { k: 4 }, ..DecodeConfig::default() },
            roi_budget: true,
            seed: 0,
            eval_every: 0,
            eval_size: 512,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(LvrError::Config("group_size must be at least 2".into()));
        }
        if !(self.temperature > 0.0) || !(self.clip_eps > 0.0 && self.clip_eps < 1.0) || !(self.beta >= 0.0) {
            return Err(LvrError::Config("need temperature > 0, clip_eps in (0,1), beta >= 0".into()));
        }
        if !(self.lr > 0.0) || self.prompts_per_iter == 0 || self.updates_per_iter == 0 {
            return Err(LvrError::Config("lr, prompts_per_iter and updates_per_iter must be positive".into()));
        }
        self.rollout_decode().validate()
    }

    pub fn rollout_decode(&self) -> DecodeConfig {
        DecodeConfig { temperature: self.temperature, greedy: false, ..self.decode.clone() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Reward {
    pub format: f64,
    pub accuracy: f64,
    pub total: f64,
}

/// Format: a `<|lvr_start|>` followed later by a `<|lvr_end|>`. Accuracy:
/// exact match of the extracted answer span.
pub fn compute_rewards(tokens: &[u32], gold: &[u32], w_format: f64, w_accuracy: f64) -> Reward {
    let format = match tokens.iter().position(|&t| t == LVR_START) {
        Some(s) => tokens[s + 1..].contains(&LVR_END),
        None => false,
    };
    let format = f64::from(u8::from(format));
    let accuracy = f64::from(u8::from(extract_answer(tokens) == gold));
    Reward { format, accuracy, total: w_format * format + w_accuracy * accuracy }
}

/// (R − mean)/std with the population std; all zeros when std < 1e-8.
pub fn normalize_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    if std < 1e-8 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// One sampled response with everything the update pass needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutRecord<S> {
    /// Caller-side id of the prompt (the instance id).
    pub prompt_id: usize,
    pub prompt: Vec<MixedElement<S>>,
    pub trace: DecodeTrace<S>,
    /// Log-probs of the sampled (non-forced) text tokens under π_old.
    pub old_logprobs: Vec<f64>,
    /// Same positions under π_ref, filled before the update.
    pub ref_logprobs: Option<Vec<f64>>,
    pub reward: Reward,
}

impl<S: Real> RolloutRecord<S> {
    /// Absolute positions of the sampled text tokens (loss positions).
    pub fn sampled_positions(&self) -> Vec<usize> {
        self.trace.token_positions.iter().zip(&self.trace.forced).filter(|(_, &f)| !f).map(|(&p, _)| p).collect()
    }

    pub fn sampled_tokens(&self) -> Vec<u32> {
        self.trace.tokens.iter().zip(&self.trace.forced).filter(|(_, &f)| !f).map(|(&t, _)| t).collect()
    }

    pub fn elements(&self) -> Vec<MixedElement<S>> {
        let mut e = self.prompt.clone();
        e.extend(self.trace.response_elements());
        e
    }

    /// JSON dump with latent vectors elided.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "prompt_id": self.prompt_id,
            "trace": self.trace.to_json(true),
            "old_logprobs": self.old_logprobs,
            "ref_logprobs": self.ref_logprobs,
            "reward": self.reward,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group<S> {
    pub records: Vec<RolloutRecord<S>>,
    pub advantages: Vec<f64>,
}

/// G temperature samples from `policy_old` for one prompt, with rewards and
/// normalized advantages.
pub fn rollout_group<S: Real, R: Rng>(
    policy_old: &ModelWeights<S>,
    prompt_id: usize,
    prompt: &[MixedElement<S>],
    gold: &[u32],
    decode: &DecodeConfig,
    cfg: &RlConfig,
    rng: &mut R,
) -> Result<Group<S>> {
    let mut records = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let trace = generate(policy_old, prompt, decode, rng)?;
        let old_logprobs = trace.logprobs.iter().zip(&trace.forced).filter(|(_, &f)| !f).map(|(&l, _)| l).collect();
        let reward = compute_rewards(&trace.tokens, gold, cfg.reward_format, cfg.reward_accuracy);
        records.push(RolloutRecord { prompt_id, prompt: prompt.to_vec(), trace, old_logprobs, ref_logprobs: None, reward });
    }
    if records.iter().all(|r| r.trace.tokens.last() != Some(&crate::model::vocab::EOS)) {
        log::warn!("prompt {prompt_id}: no rollout in the group reached EOS");
    }
    let advantages = normalize_advantages(&records.iter().map(|r| r.reward.total).collect::<Vec<_>>());
    Ok(Group { records, advantages })
}

/// Logits of a packed replay plus, for every sampled text token, the logits
/// row that predicts it and the token id.
pub struct ReplayLogits {
    pub logits: Var,
    pub rows: Vec<usize>,
    pub tokens: Vec<u32>,
}

/// One forward over every record (packed as independent segments) with the
/// recorded latent vectors as constant inputs.
pub fn replay_logits_tape<S: Real>(
    tape: &mut Tape<S>,
    weights: &ModelWeights<S>,
    vars: &[Var],
    records: &[&RolloutRecord<S>],
) -> Result<ReplayLogits> {
    let mut input = TapeInput::default();
    let mut picks = Vec::new();
    let mut rows = Vec::new();
    for rec in records {
        let base = input.len();
        let elems = rec.elements();
        let positions = rec.sampled_positions();
        let tokens = rec.sampled_tokens();
        if positions.len() != rec.old_logprobs.len() {
            return Err(LvrError::Contract(format!(
                "record {}: {} sampled tokens but {} stored log-probs",
                rec.prompt_id,
                positions.len(),
                rec.old_logprobs.len()
            )));
        }
        for (&p, &t) in positions.iter().zip(&tokens) {
            if p == 0 || p >= elems.len() || elems[p].token() != Some(t) {
                return Err(LvrError::Contract(format!("record {}: token {t} not found at position {p}", rec.prompt_id)));
            }
            rows.push(base + p - 1);
            picks.push(t);
        }
        // the final element is only ever a target; a response that filled the
        // context ends one past the last position the model can take
        let fed = &elems[..elems.len() - 1];
        input.push_segment(fed.iter().map(|e| weights.element_row(vars, e)).collect());
    }
    let out = weights.forward_tape(tape, vars, &input)?;
    Ok(ReplayLogits { logits: out.logits, rows, tokens: picks })
}

/// Log-probs of `tokens` under the given logits rows.
pub fn gather_logprobs<S: Real>(tape: &mut Tape<S>, logits: Var, rows: &[usize], tokens: &[u32]) -> Result<Var> {
    let v = tape.value(logits).shape[1];
    let picked = tape.stack_rows(rows.iter().map(|&i| RowSrc::Var(logits, i)).collect())?;
    let lp = tape.log_softmax(picked)?;
    tape.pick(lp, tokens.iter().enumerate().map(|(r, &t)| r * v + t as usize).collect())
}

/// Log-probs of the sampled text tokens of every record, concatenated in
/// record order.
pub fn replay_logprobs_tape<S: Real>(
    tape: &mut Tape<S>,
    weights: &ModelWeights<S>,
    vars: &[Var],
    records: &[&RolloutRecord<S>],
) -> Result<Var> {
    let r = replay_logits_tape(tape, weights, vars, records)?;
    gather_logprobs(tape, r.logits, &r.rows, &r.tokens)
}

/// Log-probs of the sampled text tokens of `record` under `weights`.
pub fn replay_logprobs<S: Real>(weights: &ModelWeights<S>, record: &RolloutRecord<S>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = weights.bind_frozen(&mut tape);
    let lp = replay_logprobs_tape(&mut tape, weights, &vars, &[record])?;
    Ok(tape.value(lp).data.iter().map(|x| x.f64()).collect())
}

/// Per-token inputs to the surrogate, aligned over sampled text tokens.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurrogateInputs {
    pub old: Vec<f64>,
    pub reference: Vec<f64>,
    pub advantage: Vec<f64>,
    /// 1/|y_i| divided by the number of rollouts.
    pub weight: Vec<f64>,
}

impl SurrogateInputs {
    pub fn from_groups<S: Real>(groups: &[Group<S>]) -> Result<Self> {
        let n_rollouts: usize = groups.iter().map(|g| g.records.len()).sum();
        let mut s = SurrogateInputs::default();
        for g in groups {
            for (rec, &a) in g.records.iter().zip(&g.advantages) {
                let n = rec.old_logprobs.len();
                let refs = rec.ref_logprobs.as_ref().ok_or_else(|| LvrError::Contract("reference log-probs missing".into()))?;
                if refs.len() != n {
                    return Err(LvrError::Contract("reference log-probs misaligned".into()));
                }
                s.old.extend_from_slice(&rec.old_logprobs);
                s.reference.extend_from_slice(refs);
                s.advantage.extend(std::iter::repeat(a).take(n));
                s.weight.extend(std::iter::repeat(1.0 / (n as f64 * n_rollouts as f64)).take(n));
            }
        }
        Ok(s)
    }
}

/// −Σ_t w_t·[min(r_t·Â, clip(r_t, 1−ε, 1+ε)·Â) − β·k3_t] with
/// r_t = exp(new − old) and k3 = exp(ref − new) − (ref − new) − 1.
pub fn grpo_loss<S: Real>(tape: &mut Tape<S>, new_lp: Var, inp: &SurrogateInputs, clip_eps: f64, beta: f64) -> Result<Var> {
    let n = inp.old.len();
    if tape.value(new_lp).len() != n || inp.reference.len() != n || inp.advantage.len() != n || inp.weight.len() != n {
        return Err(LvrError::dim("grpo_loss", "log-prob, advantage and weight vectors must align".to_string()));
    }
    let c = |tape: &mut Tape<S>, v: &[f64]| tape.constant(Tensor::new(vec![v.len()], v.iter().map(|&x| S::of(x)).collect()).expect("1-D"));
    let old = c(tape, &inp.old);
    let reference = c(tape, &inp.reference);
    let adv = c(tape, &inp.advantage);
    let w = c(tape, &inp.weight);
    let diff = tape.sub(new_lp, old)?;
    let ratio = tape.exp(diff)?;
    let unclipped = tape.mul(ratio, adv)?;
    let clipped_r = tape.clamp(ratio, S::of(1.0 - clip_eps), S::of(1.0 + clip_eps))?;
    let clipped = tape.mul(clipped_r, adv)?;
    let surrogate = tape.minimum(unclipped, clipped)?;
    let per_token = if beta != 0.0 {
        let d = tape.sub(reference, new_lp)?;
        let e = tape.exp(d)?;
        let k = tape.sub(e, d)?;
        let k3 = tape.add_scalar(k, -S::one())?;
        let pen = tape.scale(k3, S::of(beta))?;
        tape.sub(surrogate, pen)?
    } else {
        surrogate
    };
    let weighted = tape.mul(per_token, w)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -S::one())
}

#[cfg(test)]
mod tests;
