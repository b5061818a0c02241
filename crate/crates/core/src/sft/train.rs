use std::io::Write;
use std::path::PathBuf;

use log::{error, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_grads, LossBreakdown, SftConfig};
use crate::data::{assemble_sft_sequence, pack_batches, AssemblyMode, AssemblyOptions, Dataset, PackedBatch, Split};
use crate::decode::{batch_eval, DecodeConfig, EvalReport, StopStrategy};
use crate::error::{LvrError, Result};
use crate::model::{save_checkpoint, ModelWeights};
use crate::numerics::AdamWState;

/// One metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "L_NTP")]
    pub l_ntp: f64,
    #[serde(rename = "L_LVR")]
    pub l_lvr: f64,
    #[serde(rename = "L_switch")]
    pub l_switch: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub heldout_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct SftReport {
    pub history: Vec<StepRecord>,
    pub skipped: usize,
    pub batches: usize,
    pub final_eval: Option<EvalReport>,
}

impl SftReport {
    pub fn first(&self) -> Option<&StepRecord> {
        self.history.first()
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.history.last()
    }
}

/// Optional side outputs of a run.
#[derive(Default)]
pub struct SftOutputs {
    pub metrics: Option<Box<dyn Write>>,
    /// Checkpoints go to `step_{n}.ckpt` and `final.ckpt` in this directory.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Assembles every instance of `split`; over-long sequences are skipped with
/// a warning. Returns (instance index, sequence) pairs and the skip count.
pub fn assemble_split(
    weights: &ModelWeights<f32>,
    ds: &Dataset,
    visual_tokens: &[Vec<Vec<f32>>],
    split: Split,
    cfg: &SftConfig,
) -> Result<(Vec<usize>, Vec<crate::model::MixedSequence<f32>>, usize)> {
    let opts = AssemblyOptions {
        mode: if cfg.plain { AssemblyMode::Plain } else { AssemblyMode::Latent },
        latent_end_target: cfg.latent_end_target,
        patch_size: weights.config.patch_size,
        max_seq_len: weights.config.max_seq_len,
    };
    let (mut ids, mut seqs, mut skipped) = (Vec::new(), Vec::new(), 0);
    for (i, inst) in ds.instances.iter().enumerate().filter(|(_, x)| x.split == split) {
        match assemble_sft_sequence(inst, ds.image_shape(inst), &visual_tokens[inst.image], &opts) {
            Ok(s) => {
                ids.push(i);
                seqs.push(s);
            }
            Err(LvrError::Capacity(msg)) => {
                warn!("skipping instance {}: {msg}", inst.id);
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((ids, seqs, skipped))
}

fn eval_heldout(weights: &ModelWeights<f32>, ds: &Dataset, tokens: &[Vec<Vec<f32>>], cfg: &SftConfig) -> Result<Option<EvalReport>> {
    let held: Vec<_> = ds.split(Split::HeldOut).into_iter().take(cfg.eval_size).collect();
    if held.is_empty() {
        return Ok(None);
    }
    let dc = DecodeConfig { strategy: StopStrategy::FixedToken { k: 1 }, greedy: true, ..DecodeConfig::default() };
    batch_eval(weights, &held, tokens, ds.image_shape(held[0]), &dc, !cfg.plain).map(Some)
}

fn emit(outputs: &mut SftOutputs, rec: &StepRecord) -> Result<()> {
    if let Some(w) = outputs.metrics.as_mut() {
        serde_json::to_writer(&mut *w, rec).map_err(|e| LvrError::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Trains `weights` in place with AdamW over its trainable tensors. Each step
/// is one packed batch; batches are visited in a seeded shuffled order.
pub fn train_sft(weights: &mut ModelWeights<f32>, ds: &Dataset, cfg: &SftConfig, outputs: &mut SftOutputs) -> Result<SftReport> {
    cfg.validate()?;
    weights.set_anchor_trainable(cfg.latent_end_target);
    let tokens = ds.encode(&weights.encoder)?;
    let (ids, seqs, skipped) = assemble_split(weights, ds, &tokens, Split::Train, cfg)?;
    if seqs.is_empty() {
        return Err(LvrError::Contract("no trainable instances in the training split".into()));
    }
    let mut batches: Vec<PackedBatch<f32>> = pack_batches(seqs, cfg.l_max)?;
    for b in &mut batches {
        b.ids = b.ids.iter().map(|&i| ds.instances[ids[i]].id).collect();
    }
    info!("sft: {} sequences in {} packed batches, {skipped} skipped", ids.len(), batches.len());
    let lw = cfg.loss_weights();
    let mut opt = AdamWState::new(cfg.adamw(), &weights.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut report = SftReport { skipped, batches: batches.len(), ..SftReport::default() };
    for step in 0..cfg.steps {
        if order.is_empty() {
            order = (0..batches.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let b = order.pop().expect("refilled above");
        let batch = &batches[b];
        let (breakdown, grads) = loss_and_grads(weights, batch, &lw).map_err(|e| {
            error!("sft step {step}: batch {b} (instances {:?}) failed: {e}", batch.ids);
            match e {
                LvrError::Numeric(m) => LvrError::Numeric(format!("step {step}, batch {b}, instances {:?}: {m}", batch.ids)),
                other => other,
            }
        })?;
        if !breakdown.l_total.is_finite() {
            return Err(LvrError::Numeric(format!("non-finite loss at step {step}, batch {b}, instances {:?}", batch.ids)));
        }
        let lr = if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
            cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64
        } else {
            cfg.lr
        };
        opt.step_with_lr(&mut weights.params, &grads, lr)?;
        let mut rec = record(step, &breakdown, lr);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            rec.heldout_accuracy = eval_heldout(weights, ds, &tokens, cfg)?.map(|r| r.accuracy);
        }
        emit(outputs, &rec)?;
        report.history.push(rec);
        if let Some(dir) = &outputs.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                std::fs::create_dir_all(dir)?;
                save_checkpoint(weights, &dir.join(format!("step_{}.ckpt", step + 1)))?;
            }
        }
    }
    if cfg.eval_every > 0 {
        report.final_eval = eval_heldout(weights, ds, &tokens, cfg)?;
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(weights, &dir.join("final.ckpt"))?;
    }
    Ok(report)
}

fn record(step: usize, b: &LossBreakdown, lr: f64) -> StepRecord {
    StepRecord {
        step,
        l_ntp: b.l_ntp,
        l_lvr: b.l_lvr,
        l_switch: b.l_switch,
        l_total: b.l_total,
        lr,
        heldout_accuracy: None,
    }
}
