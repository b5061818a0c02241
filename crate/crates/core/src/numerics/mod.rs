//! Dense tensors, a reverse-mode tape, AdamW and a finite-difference checker.

pub mod adamw;
pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use adamw::{AdamWConfig, AdamWState, Param};
pub use gradcheck::{finite_diff_check, finite_diff_check_with, finite_diff_entries, finite_diff_entries_with, GradCheckReport, GradEntry, Stencil};
pub use tape::{RowSrc, Tape, Var};
pub use tensor::{Real, Tensor};

use crate::error::{LvrError, Result};

/// Plain matrix product without recording.
pub fn matmul<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb)?;
    Ok(tape.value(c).clone())
}

/// Row-wise log-softmax.
pub fn softmax_logprobs<S: Real>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    if !logits.is_finite() {
        return Err(LvrError::Numeric("softmax_logprobs input".into()));
    }
    let mut tape = Tape::new();
    let v = tape.constant(logits.clone());
    let out = tape.log_softmax(v)?;
    Ok(tape.value(out).clone())
}

/// (1/T)·Σ_t ‖pred_t − target_t‖²₂ over the T rows.
pub fn mse<S: Real>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(pred.clone()), tape.constant(target.clone()));
    let out = tape.mse(a, b)?;
    Ok(tape.value(out).item())
}
