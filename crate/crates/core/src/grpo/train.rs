use std::io::Write;
use std::path::PathBuf;

use log::{error, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{grpo_loss, replay_logprobs_tape, rollout_group, Group, RlConfig, SurrogateInputs};
use crate::data::{bbox_to_patch_indices, prompt_elements, Dataset, SftInstance, Split};
use crate::decode::{batch_eval, DecodeConfig, EvalReport, StopStrategy};
use crate::error::{LvrError, Result};
use crate::model::{save_checkpoint, ModelWeights};
use crate::numerics::{AdamWConfig, AdamWState, Tape};
use crate::sft::collect_grads;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlStepRecord {
    pub iter: usize,
    pub mean_reward: f64,
    pub mean_format: f64,
    pub mean_accuracy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub trigger_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub heldout_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct RlReport {
    pub history: Vec<RlStepRecord>,
    pub initial_eval: Option<EvalReport>,
    pub final_eval: Option<EvalReport>,
}

#[derive(Default)]
pub struct RlOutputs {
    pub metrics: Option<Box<dyn Write>>,
    /// Every rollout of every iteration, one JSON record per line.
    pub rollouts: Option<Box<dyn Write>>,
    pub checkpoint_dir: Option<PathBuf>,
}

fn decode_for(inst: &SftInstance, weights: &ModelWeights<f32>, shape: [usize; 3], cfg: &RlConfig, base: &DecodeConfig) -> Result<DecodeConfig> {
    let mut d = base.clone();
    if cfg.roi_budget {
        if let StopStrategy::FixedToken { .. } = d.strategy {
            let k = bbox_to_patch_indices(&inst.bbox, shape[1], shape[2], weights.config.patch_size)?.len();
            d.strategy = StopStrategy::FixedToken { k };
            d.max_latent_steps = d.max_latent_steps.max(k);
        }
    }
    Ok(d)
}

/// Greedy held-out accuracy under the rollout stopping rule.
pub fn heldout_eval(weights: &ModelWeights<f32>, ds: &Dataset, tokens: &[Vec<Vec<f32>>], cfg: &RlConfig) -> Result<Option<EvalReport>> {
    let held: Vec<_> = ds.split(Split::HeldOut).into_iter().take(cfg.eval_size).collect();
    if held.is_empty() {
        return Ok(None);
    }
    let dc = DecodeConfig { greedy: true, ..cfg.decode.clone() };
    batch_eval(weights, &held, tokens, ds.image_shape(held[0]), &dc, cfg.roi_budget).map(Some)
}

/// Fills reference log-probs by replaying every record under `reference`.
fn fill_reference(reference: &ModelWeights<f32>, groups: &mut [Group<f32>]) -> Result<()> {
    groups.par_iter_mut().try_for_each(|g| {
        let mut tape = Tape::new();
        let vars = reference.bind_frozen(&mut tape);
        let recs: Vec<_> = g.records.iter().collect();
        let lp = replay_logprobs_tape(&mut tape, reference, &vars, &recs)?;
        let vals = &tape.value(lp).data;
        let mut off = 0;
        for r in g.records.iter_mut() {
            let n = r.old_logprobs.len();
            r.ref_logprobs = Some(vals[off..off + n].iter().map(|&x| x as f64).collect());
            off += n;
        }
        Ok(())
    })
}

/// GRPO over the training split starting from `policy`; `reference` stays fixed.
pub fn train_rl(
    policy: &mut ModelWeights<f32>,
    reference: &ModelWeights<f32>,
    ds: &Dataset,
    cfg: &RlConfig,
    outputs: &mut RlOutputs,
) -> Result<RlReport> {
    cfg.validate()?;
    let tokens = ds.encode(&policy.encoder)?;
    let train: Vec<&SftInstance> = ds.split(Split::Train);
    if train.is_empty() {
        return Err(LvrError::Contract("no training prompts".into()));
    }
    let mut report = RlReport { initial_eval: heldout_eval(policy, ds, &tokens, cfg)?, ..RlReport::default() };
    if let Some(e) = &report.initial_eval {
        info!("rl: initial held-out accuracy {:.4}", e.accuracy);
    }
    let mut opt = AdamWState::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() }, &policy.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let rollout_cfg = cfg.rollout_decode();
    for iter in 0..cfg.iterations {
        let mut picked = Vec::with_capacity(cfg.prompts_per_iter);
        while picked.len() < cfg.prompts_per_iter {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            picked.push(train[order.pop().expect("refilled")]);
        }
        let old = policy.clone();
        let mut groups: Vec<Group<f32>> = picked
            .par_iter()
            .enumerate()
            .map(|(j, inst)| {
                let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((iter as u64) << 20) ^ j as u64);
                let dc = decode_for(inst, &old, ds.image_shape(inst), cfg, &rollout_cfg)?;
                let prompt = prompt_elements(inst, &tokens[inst.image]);
                rollout_group(&old, inst.id, &prompt, &inst.answer, &dc, cfg, &mut r)
            })
            .collect::<Result<_>>()?;
        fill_reference(reference, &mut groups)?;
        if let Some(w) = outputs.rollouts.as_mut() {
            for g in &groups {
                for (rec, a) in g.records.iter().zip(&g.advantages) {
                    let mut j = rec.to_json();
                    j["iter"] = serde_json::json!(iter);
                    j["advantage"] = serde_json::json!(a);
                    writeln!(w, "{j}")?;
                }
            }
        }
        let inputs = SurrogateInputs::from_groups(&groups)?;
        let records: Vec<_> = groups.iter().flat_map(|g| g.records.iter()).collect();
        let mut stats = (0.0, 0.0, 0.0);
        for _ in 0..cfg.updates_per_iter {
            let mut tape = Tape::new();
            let vars = policy.bind(&mut tape);
            let new_lp = replay_logprobs_tape(&mut tape, policy, &vars, &records)?;
            let loss = grpo_loss(&mut tape, new_lp, &inputs, cfg.clip_eps, cfg.beta)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                error!("rl iteration {iter}: non-finite loss; rollouts follow");
                for r in &records {
                    error!("{}", r.to_json());
                }
                return Err(LvrError::Numeric(format!("non-finite GRPO loss at iteration {iter}")));
            }
            stats = ratio_stats(&tape.value(new_lp).data, &inputs, cfg.clip_eps);
            tape.backward(loss).map_err(|e| LvrError::Numeric(format!("iteration {iter}: {e}")))?;
            let grads = collect_grads(&tape, policy, &vars);
            opt.step(&mut policy.params, &grads)?;
        }
        let n = records.len() as f64;
        let mut rec = RlStepRecord {
            iter,
            mean_reward: records.iter().map(|r| r.reward.total).sum::<f64>() / n,
            mean_format: records.iter().map(|r| r.reward.format).sum::<f64>() / n,
            mean_accuracy: records.iter().map(|r| r.reward.accuracy).sum::<f64>() / n,
            mean_ratio: stats.0,
            clip_fraction: stats.1,
            kl: stats.2,
            trigger_fraction: records.iter().filter(|r| r.trace.triggered()).count() as f64 / n,
            heldout_accuracy: None,
        };
        if cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0 {
            rec.heldout_accuracy = heldout_eval(policy, ds, &tokens, cfg)?.map(|e| e.accuracy);
        }
        if let Some(w) = outputs.metrics.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec).map_err(|e| LvrError::Io(e.into()))?)?;
        }
        report.history.push(rec);
    }
    report.final_eval = heldout_eval(policy, ds, &tokens, cfg)?;
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(policy, &dir.join("final.ckpt"))?;
    }
    Ok(report)
}

/// Mean ratio, fraction of tokens outside the clip range, mean k3 estimate.
fn ratio_stats(new_lp: &[f32], inp: &SurrogateInputs, eps: f64) -> (f64, f64, f64) {
    let n = new_lp.len().max(1) as f64;
    let (mut r_sum, mut clipped, mut kl) = (0.0, 0.0, 0.0);
    for (i, &lp) in new_lp.iter().enumerate() {
        let r = (lp as f64 - inp.old[i]).exp();
        r_sum += r;
        clipped += f64::from(u8::from(r < 1.0 - eps || r > 1.0 + eps));
        let d = inp.reference[i] - lp as f64;
        kl += d.exp() - d - 1.0;
    }
    (r_sum / n, clipped / n, kl / n)
}
