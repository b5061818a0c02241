use super::roi::bbox_to_patch_indices;
use super::SftInstance;
use crate::error::{LvrError, Result};
use crate::model::vocab::{BOS, EOS, LVR_END, LVR_START};
use crate::model::{LatentTarget, MixedElement, MixedSequence};
use crate::numerics::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssemblyMode {
    /// Question, latent block over the ROI tokens, answer.
    Latent,
    /// Question followed directly by the answer.
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AssemblyOptions {
    pub mode: AssemblyMode,
    /// Supervise the output after the last ROI token toward the latent-end
    /// anchor and append one extra latent input before `<|lvr_end|>`.
    pub latent_end_target: bool,
    pub patch_size: usize,
    pub max_seq_len: usize,
}

/// `[BOS, visual tokens…, question…]`
pub fn prompt_elements<S: Real>(instance: &SftInstance, visual_tokens: &[Vec<S>]) -> Vec<MixedElement<S>> {
    let mut out = Vec::with_capacity(1 + visual_tokens.len() + instance.question.len());
    out.push(MixedElement::TextToken(BOS));
    out.extend(visual_tokens.iter().map(|v| MixedElement::VisualEmbed(v.clone())));
    out.extend(instance.question.iter().map(|&q| MixedElement::TextToken(q)));
    out
}

/// Builds the teacher-forced training sequence
/// `[BOS, V, question, <|lvr_start|>, v_1 … v_T, <|lvr_end|>, answer, EOS]`.
///
/// Targets: the last question token predicts `<|lvr_start|>`; the output at
/// `<|lvr_start|>` reconstructs v_1 and the output at v_t reconstructs v_{t+1};
/// the output at v_T predicts `<|lvr_end|>`; answer positions carry ordinary
/// next-token targets ending in EOS. Switch targets are 0 across the block
/// except 1 where `<|lvr_end|>` is the text target.
pub fn assemble_sft_sequence<S: Real>(
    instance: &SftInstance,
    image_shape: [usize; 3],
    visual_tokens: &[Vec<S>],
    opts: &AssemblyOptions,
) -> Result<MixedSequence<S>> {
    let [_, h, w] = image_shape;
    let mut seq = MixedSequence::from_elements(prompt_elements(instance, visual_tokens));
    let last_q = seq.len() - 1;
    match opts.mode {
        AssemblyMode::Plain => {
            seq.items[last_q].text_target = instance.answer.first().copied().or(Some(EOS));
        }
        AssemblyMode::Latent => {
            let idx = bbox_to_patch_indices(&instance.bbox, h, w, opts.patch_size)?;
            if let Some(&bad) = idx.iter().find(|&&i| i >= visual_tokens.len()) {
                return Err(LvrError::dim("assemble", format!("patch index {bad} outside {} visual tokens", visual_tokens.len())));
            }
            let roi: Vec<&Vec<S>> = idx.iter().map(|&i| &visual_tokens[i]).collect();
            seq.items[last_q].text_target = Some(LVR_START);
            let start = seq.push(MixedElement::TextToken(LVR_START));
            start.latent_target = Some(LatentTarget::Visual(roi[0].clone()));
            start.switch_target = Some(0);
            for (t, v) in roi.iter().enumerate() {
                let item = seq.push(MixedElement::LatentInput((*v).clone()));
                match roi.get(t + 1) {
                    Some(next) => {
                        item.latent_target = Some(LatentTarget::Visual((*next).clone()));
                        item.switch_target = Some(0);
                    }
                    None if opts.latent_end_target => {
                        item.latent_target = Some(LatentTarget::EndAnchor);
                        item.switch_target = Some(0);
                    }
                    None => {
                        item.text_target = Some(LVR_END);
                        item.switch_target = Some(1);
                    }
                }
            }
            if opts.latent_end_target {
                // Input placeholder; training substitutes the anchor vector.
                let item = seq.push(MixedElement::LatentInput(vec![S::zero(); roi[0].len()]));
                item.text_target = Some(LVR_END);
                item.switch_target = Some(1);
            }
            let end = seq.push(MixedElement::TextToken(LVR_END));
            end.text_target = instance.answer.first().copied().or(Some(EOS));
        }
    }
    for (i, &a) in instance.answer.iter().enumerate() {
        seq.push(MixedElement::TextToken(a)).text_target = Some(instance.answer.get(i + 1).copied().unwrap_or(EOS));
    }
    seq.push(MixedElement::TextToken(EOS));
    seq.validate(opts.max_seq_len, visual_tokens.first().map_or(0, Vec::len))?;
    Ok(seq)
}

/// Positions of the latent inputs whose value is the latent-end anchor.
pub fn anchor_input_positions<S: Real>(seq: &MixedSequence<S>) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 1..seq.len() {
        if seq.items[i].input.is_latent() && matches!(seq.items[i - 1].latent_target, Some(LatentTarget::EndAnchor)) {
            out.push(i);
        }
    }
    out
}
