//! Differentiable full-sequence forward pass on the tape (training and replay).

use super::sequence::MixedElement;
use super::weights::{HeadLayout, ModelWeights};
use crate::error::{LvrError, Result};
use crate::numerics::{RowSrc, Tape, Var};
use crate::numerics::Real;

/// Rows entering the first block, with their absolute positions and the start
/// index of the packed segment each row belongs to.
#[derive(Clone, Debug, Default)]
pub struct TapeInput<S> {
    pub rows: Vec<RowSrc<S>>,
    pub positions: Vec<usize>,
    pub seg_start: Vec<usize>,
}

impl<S: Real> TapeInput<S> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends one packed segment; positions restart at zero.
    pub fn push_segment(&mut self, rows: Vec<RowSrc<S>>) {
        let start = self.rows.len();
        for (i, r) in rows.into_iter().enumerate() {
            self.rows.push(r);
            self.positions.push(i);
            self.seg_start.push(start);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TapeOutput {
    /// Final-block residual stream [L×d], before the output norm.
    pub hidden: Var,
    /// [L×vocab]
    pub logits: Var,
}

impl<S: Real> ModelWeights<S> {
    /// Registers every tensor on the tape: trainable ones as gradient leaves,
    /// frozen ones as constants. Returned vars follow `self.params` order.
    pub fn bind(&self, tape: &mut Tape<S>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if p.trainable { tape.param(&p.tensor) } else { tape.constant(p.tensor.clone()) })
            .collect()
    }

    /// Binds every tensor as a constant (no gradients anywhere).
    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect()
    }

    /// Input row for an element: token embedding row or the raw vector.
    pub fn element_row(&self, vars: &[Var], element: &MixedElement<S>) -> RowSrc<S> {
        match element {
            MixedElement::TextToken(id) => RowSrc::Var(vars[self.layout.tok_emb], *id as usize),
            MixedElement::VisualEmbed(v) | MixedElement::LatentInput(v) => RowSrc::Const(v.clone()),
        }
    }

    pub fn forward_tape(&self, tape: &mut Tape<S>, vars: &[Var], input: &TapeInput<S>) -> Result<TapeOutput> {
        let c = &self.config;
        if let Some(&p) = input.positions.iter().max() {
            if p >= c.max_seq_len {
                return Err(LvrError::Capacity(format!("position {p} exceeds max_seq_len {}", c.max_seq_len)));
            }
        }
        for r in &input.rows {
            if let RowSrc::Var(v, id) = r {
                if *v == vars[self.layout.tok_emb] && *id >= c.vocab_size {
                    return Err(LvrError::dim("forward", format!("token id {id} outside vocabulary")));
                }
            }
        }
        let l = &self.layout;
        let emb = tape.stack_rows(input.rows.clone())?;
        let pos = tape.stack_rows(input.positions.iter().map(|&p| RowSrc::Var(vars[l.pos_emb], p)).collect())?;
        let mut x = tape.add(emb, pos)?;
        for b in &l.blocks {
            let h = tape.layer_norm(x, vars[b.ln1_g], vars[b.ln1_b])?;
            let q = linear(tape, h, vars[b.wq], Some(vars[b.bq]))?;
            let k = linear(tape, h, vars[b.wk], None)?;
            let v = linear(tape, h, vars[b.wv], Some(vars[b.bv]))?;
            let a = tape.attention(q, k, v, c.n_heads, input.seg_start.clone())?;
            let o = linear(tape, a, vars[b.wo], Some(vars[b.bo]))?;
            x = tape.add(x, o)?;
            let h2 = tape.layer_norm(x, vars[b.ln2_g], vars[b.ln2_b])?;
            let up = linear(tape, h2, vars[b.w1], Some(vars[b.b1]))?;
            let act = tape.gelu(up)?;
            let down = linear(tape, act, vars[b.w2], Some(vars[b.b2]))?;
            x = tape.add(x, down)?;
        }
        let normed = tape.layer_norm(x, vars[l.ln_f_g], vars[l.ln_f_b])?;
        let logits = tape.matmul(normed, vars[l.lm_head])?;
        Ok(TapeOutput { hidden: x, logits })
    }

    /// LVR head on a batch of hidden rows [n×d].
    pub fn head_tape(&self, tape: &mut Tape<S>, vars: &[Var], h: Var) -> Result<Var> {
        match self.layout.head {
            HeadLayout::Identity => Ok(h),
            HeadLayout::Mlp2 { w1, b1, w2, b2 } => {
                let a = linear(tape, h, vars[w1], Some(vars[b1]))?;
                let a = tape.gelu(a)?;
                linear(tape, a, vars[w2], Some(vars[b2]))
            }
            HeadLayout::Glu3x { w_gate, w_up, w_down } => {
                let g = tape.matmul(h, vars[w_gate])?;
                let g = tape.sigmoid(g)?;
                let u = tape.matmul(h, vars[w_up])?;
                let gu = tape.mul(g, u)?;
                tape.matmul(gu, vars[w_down])
            }
        }
    }
}

pub(crate) fn linear<S: Real>(tape: &mut Tape<S>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}
