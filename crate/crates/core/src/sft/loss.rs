use log::warn;
use serde::{Deserialize, Serialize};

use super::FeedMode;
use crate::data::PackedBatch;
use crate::error::{LvrError, Result};
use crate::model::vocab::LVR_END;
use crate::model::{LatentTarget, ModelWeights, TapeInput, TapeOutput};
use crate::numerics::{Real, RowSrc, Tape, Var};

/// Component values of one batch loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ntp: f64,
    pub l_lvr: f64,
    pub l_switch: f64,
    pub l_total: f64,
    pub text_targets: usize,
    pub latent_targets: usize,
}

/// (1/T)·Σ_t ‖pred_t − target_t‖² over `[T×d]` rows; zero rows contribute 0.
pub fn lvr_loss<S: Real>(tape: &mut Tape<S>, pred: Var, target: Var) -> Result<Var> {
    if tape.value(pred).rows() == 0 || tape.value(pred).is_empty() {
        warn!("no latent targets in batch; L_LVR contributes 0");
        return Ok(tape.constant(crate::numerics::Tensor::scalar(S::zero())));
    }
    tape.mse(pred, target)
}

/// Mean negative log-likelihood of `targets[r]` under row `r` of `logits`.
pub fn ntp_loss<S: Real>(tape: &mut Tape<S>, logits: Var, targets: &[u32]) -> Result<Var> {
    if targets.is_empty() {
        return Err(LvrError::Contract("ntp_loss needs at least one text target".into()));
    }
    let v = tape.value(logits).cols();
    if tape.value(logits).rows() != targets.len() {
        return Err(LvrError::dim("ntp_loss", format!("{} logit rows vs {} targets", tape.value(logits).rows(), targets.len())));
    }
    let lp = tape.log_softmax(logits)?;
    let picked = tape.pick(lp, targets.iter().enumerate().map(|(r, &t)| r * v + t as usize).collect())?;
    let m = tape.mean(picked)?;
    tape.scale(m, -S::one())
}

/// Binary cross-entropy of p_t = softmax(logits_t)[<|lvr_end|>] against
/// `targets`, averaged over rows.
pub fn mode_switch_loss<S: Real>(tape: &mut Tape<S>, logits: Var, targets: &[u8]) -> Result<Var> {
    if targets.is_empty() {
        return Ok(tape.constant(crate::numerics::Tensor::scalar(S::zero())));
    }
    let v = tape.value(logits).cols();
    let lp = tape.log_softmax(logits)?;
    let col = LVR_END as usize;
    let ones: Vec<usize> = targets.iter().enumerate().filter(|(_, &t)| t == 1).map(|(r, _)| r * v + col).collect();
    let zeros: Vec<usize> = targets.iter().enumerate().filter(|(_, &t)| t == 0).map(|(r, _)| r * v + col).collect();
    let mut terms = Vec::new();
    if !ones.is_empty() {
        let p = tape.pick(lp, ones)?;
        terms.push(tape.sum(p)?);
    }
    if !zeros.is_empty() {
        let p = tape.pick(lp, zeros)?;
        let q = tape.log1m_exp(p)?;
        terms.push(tape.sum(q)?);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, S::of(-1.0 / targets.len() as f64))
}

/// Loss weights used by `joint_loss`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_lvr: f64,
    pub lambda_switch: f64,
    pub feed: FeedMode,
}

/// Forward pass over a packed batch. Teacher-forced latent inputs are the
/// stored vectors (the anchor slot reads the latent-end parameter); self-fed
/// inputs are the LVR-head outputs of the preceding position, resolved by
/// repeating the pass once per latent step.
pub fn forward_batch<S: Real>(
    tape: &mut Tape<S>,
    weights: &ModelWeights<S>,
    vars: &[Var],
    batch: &PackedBatch<S>,
    feed: FeedMode,
) -> Result<TapeOutput> {
    let anchor = RowSrc::Var(vars[weights.layout.latent_end], 0);
    let mut input = TapeInput::default();
    let mut latent_pos = Vec::new();
    for seq in &batch.sequences {
        let base = input.len();
        let anchors = crate::data::assemble::anchor_input_positions(seq);
        let rows = seq
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                if it.input.is_latent() {
                    latent_pos.push(base + i);
                    if anchors.contains(&i) {
                        return anchor.clone();
                    }
                }
                weights.element_row(vars, &it.input)
            })
            .collect();
        input.push_segment(rows);
    }
    if feed == FeedMode::TeacherForced || latent_pos.is_empty() {
        return weights.forward_tape(tape, vars, &input);
    }
    let d = weights.d_model();
    let mut run = 0;
    let mut longest = 0;
    for (k, &p) in latent_pos.iter().enumerate() {
        run = if k > 0 && latent_pos[k - 1] + 1 == p { run + 1 } else { 1 };
        longest = longest.max(run);
    }
    for &p in &latent_pos {
        input.rows[p] = RowSrc::Const(vec![S::zero(); d]);
    }
    let mut out = weights.forward_tape(tape, vars, &input)?;
    for _ in 0..longest {
        let prev = tape.stack_rows(latent_pos.iter().map(|&p| RowSrc::Var(out.hidden, p - 1)).collect())?;
        let fed = weights.head_tape(tape, vars, prev)?;
        for (j, &p) in latent_pos.iter().enumerate() {
            input.rows[p] = RowSrc::Var(fed, j);
        }
        out = weights.forward_tape(tape, vars, &input)?;
    }
    Ok(out)
}

/// L = L_NTP + λ_LVR·L_LVR + λ_switch·L_switch, each term averaged over the
/// targeted positions pooled across the packed sequences. Terms with a zero
/// weight are reported but kept off the differentiated loss.
pub fn joint_loss<S: Real>(
    tape: &mut Tape<S>,
    weights: &ModelWeights<S>,
    vars: &[Var],
    batch: &PackedBatch<S>,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let out = forward_batch(tape, weights, vars, batch, w.feed)?;
    let anchor = RowSrc::Var(vars[weights.layout.latent_end], 0);
    let (mut text_rows, mut text_ids) = (Vec::new(), Vec::new());
    let (mut lat_rows, mut lat_targets) = (Vec::new(), Vec::new());
    let (mut sw_rows, mut sw_targets) = (Vec::new(), Vec::new());
    for (seq, range) in batch.sequences.iter().zip(&batch.boundaries) {
        for (i, it) in seq.items.iter().enumerate() {
            let g = range.start + i;
            if let Some(t) = it.text_target {
                text_rows.push(RowSrc::Var(out.logits, g));
                text_ids.push(t);
            }
            match &it.latent_target {
                Some(LatentTarget::Visual(v)) => {
                    lat_rows.push(RowSrc::Var(out.hidden, g));
                    lat_targets.push(RowSrc::Const(v.clone()));
                }
                Some(LatentTarget::EndAnchor) => {
                    lat_rows.push(RowSrc::Var(out.hidden, g));
                    lat_targets.push(anchor.clone());
                }
                None => {}
            }
            if let Some(s) = it.switch_target {
                sw_rows.push(RowSrc::Var(out.logits, g));
                sw_targets.push(s);
            }
        }
    }
    let text_logits = tape.stack_rows(text_rows)?;
    let l_ntp = ntp_loss(tape, text_logits, &text_ids)?;
    let mut total = l_ntp;

    let n_lat = lat_rows.len();
    let l_lvr = if n_lat > 0 {
        let h = tape.stack_rows(lat_rows)?;
        let pred = weights.head_tape(tape, vars, h)?;
        let target = tape.stack_rows(lat_targets)?;
        lvr_loss(tape, pred, target)?
    } else {
        warn!("batch without latent targets; L_LVR contributes 0");
        tape.constant(crate::numerics::Tensor::scalar(S::zero()))
    };
    if w.lambda_lvr != 0.0 {
        let scaled = tape.scale(l_lvr, S::of(w.lambda_lvr))?;
        total = tape.add(total, scaled)?;
    }

    let l_switch = if sw_rows.is_empty() {
        tape.constant(crate::numerics::Tensor::scalar(S::zero()))
    } else {
        let sl = tape.stack_rows(sw_rows)?;
        mode_switch_loss(tape, sl, &sw_targets)?
    };
    if w.lambda_switch != 0.0 {
        let scaled = tape.scale(l_switch, S::of(w.lambda_switch))?;
        total = tape.add(total, scaled)?;
    }

    let val = |tape: &Tape<S>, v: Var| tape.value(v).item().f64();
    let breakdown = LossBreakdown {
        l_ntp: val(tape, l_ntp),
        l_lvr: val(tape, l_lvr),
        l_switch: val(tape, l_switch),
        l_total: val(tape, total),
        text_targets: text_ids.len(),
        latent_targets: n_lat,
    };
    Ok((total, breakdown))
}

/// Loss and gradients for every parameter of `weights` (None for frozen ones,
/// zeros for trainable ones the loss does not reach).
pub fn loss_and_grads<S: Real>(
    weights: &ModelWeights<S>,
    batch: &PackedBatch<S>,
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<Option<Vec<S>>>)> {
    let mut tape = Tape::new();
    let vars = weights.bind(&mut tape);
    let (loss, breakdown) = joint_loss(&mut tape, weights, &vars, batch, w)?;
    tape.backward(loss)?;
    Ok((breakdown, collect_grads(&tape, weights, &vars)))
}

pub fn collect_grads<S: Real>(tape: &Tape<S>, weights: &ModelWeights<S>, vars: &[Var]) -> Vec<Option<Vec<S>>> {
    weights
        .params
        .iter()
        .zip(vars)
        .map(|(p, &v)| {
            p.trainable.then(|| tape.grad(v).map(<[S]>::to_vec).unwrap_or_else(|| vec![S::zero(); p.tensor.len()]))
        })
        .collect()
}
