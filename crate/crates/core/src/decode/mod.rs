//! Interleaved generation: text sampling, latent mode entered at
//! `<|lvr_start|>` with LVR-head outputs fed back as inputs, the three stopping
//! rules, and held-out evaluation.

mod eval;
mod stop;

pub use eval::{batch_eval, eval_sweep, extract_answer, EvalReport, SweepRow, TaskAccuracy};
pub use stop::{stop_fixed, stop_latent_end, stop_mode_switch, DistanceMetric};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LvrError, Result};
use crate::model::vocab::{EOS, LVR_END, LVR_START};
use crate::model::{KvCache, MixedElement, ModelWeights};
use crate::numerics::kernels::{argmax, log_softmax_row};
use crate::numerics::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StopStrategy {
    FixedToken { k: usize },
    LatentEnd { metric: DistanceMetric, threshold: f64 },
    ModeSwitch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub strategy: StopStrategy,
    pub max_latent_steps: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub greedy: bool,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: StopStrategy::FixedToken { k: 4 },
            max_latent_steps: 64,
            max_new_tokens: 16,
            temperature: 1.0,
            greedy: true,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if let StopStrategy::FixedToken { k } = self.strategy {
            if k == 0 || k > self.max_latent_steps {
                return Err(LvrError::Config(format!("FixedToken needs 1 <= K <= max_latent_steps, got K={k}")));
            }
        }
        if !self.greedy && !(self.temperature > 0.0) {
            return Err(LvrError::Config("temperature must be positive when sampling".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(LvrError::Config("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentStop {
    Fixed,
    LatentEnd,
    ModeSwitch,
    /// `max_latent_steps` reached.
    Cap,
    /// Context full inside the latent block; no `<|lvr_end|>` follows.
    Capacity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Eos,
    MaxNewTokens,
    Capacity,
}

/// Latent vectors fed during one latent block, at absolute positions.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSegment<S> {
    pub positions: Vec<usize>,
    pub vectors: Vec<Vec<S>>,
    pub stop: SegmentStop,
}

/// One generated response. `tokens[i]` sits at absolute position
/// `token_positions[i]`; `logprobs[i]` is its untempered log-probability and
/// `forced[i]` marks `<|lvr_end|>` tokens inserted by a stopping rule.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeTrace<S> {
    pub prompt_len: usize,
    pub tokens: Vec<u32>,
    pub token_positions: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub forced: Vec<bool>,
    pub segments: Vec<LatentSegment<S>>,
    pub finish: FinishReason,
}

impl<S: Real> DecodeTrace<S> {
    /// Response elements in position order.
    pub fn response_elements(&self) -> Vec<MixedElement<S>> {
        let n = self.tokens.len() + self.segments.iter().map(|s| s.vectors.len()).sum::<usize>();
        let mut out: Vec<Option<MixedElement<S>>> = vec![None; n];
        for (&t, &p) in self.tokens.iter().zip(&self.token_positions) {
            out[p - self.prompt_len] = Some(MixedElement::TextToken(t));
        }
        for seg in &self.segments {
            for (v, &p) in seg.vectors.iter().zip(&seg.positions) {
                out[p - self.prompt_len] = Some(MixedElement::LatentInput(v.clone()));
            }
        }
        out.into_iter().map(|e| e.expect("positions partition the response")).collect()
    }

    pub fn latent_steps(&self) -> usize {
        self.segments.iter().map(|s| s.vectors.len()).sum()
    }

    pub fn triggered(&self) -> bool {
        self.tokens.contains(&LVR_START)
    }

    /// JSON form; latent vectors are replaced by their count when `elide_latents`.
    pub fn to_json(&self, elide_latents: bool) -> serde_json::Value {
        let segs: Vec<serde_json::Value> = self
            .segments
            .iter()
            .map(|s| {
                let mut v = serde_json::json!({ "positions": s.positions, "stop": s.stop });
                if !elide_latents {
                    let vecs: Vec<Vec<f64>> = s.vectors.iter().map(|x| x.iter().map(|y| y.f64()).collect()).collect();
                    v["vectors"] = serde_json::json!(vecs);
                }
                v
            })
            .collect();
        serde_json::json!({
            "prompt_len": self.prompt_len,
            "tokens": self.tokens,
            "token_positions": self.token_positions,
            "logprobs": self.logprobs,
            "forced": self.forced,
            "segments": segs,
            "finish": self.finish,
        })
    }
}

/// How the next hidden state and logits are obtained.
trait Stepper<S: Real> {
    fn len(&self) -> usize;
    fn step(&mut self, weights: &ModelWeights<S>, elems: &[MixedElement<S>]) -> Result<(Vec<S>, Vec<S>)>;
}

struct Cached<S>(KvCache<S>);

impl<S: Real> Stepper<S> for Cached<S> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn step(&mut self, weights: &ModelWeights<S>, elems: &[MixedElement<S>]) -> Result<(Vec<S>, Vec<S>)> {
        let out = weights.forward_mixed(elems, Some(&mut self.0))?;
        let last = out.hidden.rows() - 1;
        Ok((out.hidden.row(last).to_vec(), out.logits.row(last).to_vec()))
    }
}

/// Re-runs the whole sequence at every step.
struct Full<S>(Vec<MixedElement<S>>);

impl<S: Real> Stepper<S> for Full<S> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn step(&mut self, weights: &ModelWeights<S>, elems: &[MixedElement<S>]) -> Result<(Vec<S>, Vec<S>)> {
        self.0.extend_from_slice(elems);
        let out = weights.forward_mixed(&self.0, None)?;
        let last = out.hidden.rows() - 1;
        Ok((out.hidden.row(last).to_vec(), out.logits.row(last).to_vec()))
    }
}

/// Generates a response to `prompt` with the KV cache.
pub fn generate<S: Real, R: Rng>(
    weights: &ModelWeights<S>,
    prompt: &[MixedElement<S>],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<DecodeTrace<S>> {
    run(weights, prompt, cfg, rng, Cached(weights.new_cache()))
}

/// Same as `generate` but recomputes the full sequence at every step.
pub fn generate_full_recompute<S: Real, R: Rng>(
    weights: &ModelWeights<S>,
    prompt: &[MixedElement<S>],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<DecodeTrace<S>> {
    run(weights, prompt, cfg, rng, Full(Vec::new()))
}

fn sample<S: Real, R: Rng>(logits: &[S], cfg: &DecodeConfig, rng: &mut R) -> usize {
    if cfg.greedy {
        return argmax(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l.f64() / cfg.temperature).collect();
    let mut lp = vec![0.0; scaled.len()];
    log_softmax_row(&scaled, &mut lp);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative sum
    lp.iter().rposition(|l| l.is_finite() && *l > f64::NEG_INFINITY).unwrap_or(0)
}

fn logprob<S: Real>(logits: &[S], id: usize) -> f64 {
    let row: Vec<f64> = logits.iter().map(|l| l.f64()).collect();
    let mut lp = vec![0.0; row.len()];
    log_softmax_row(&row, &mut lp);
    lp[id]
}

fn run<S: Real, R: Rng, St: Stepper<S>>(
    weights: &ModelWeights<S>,
    prompt: &[MixedElement<S>],
    cfg: &DecodeConfig,
    rng: &mut R,
    mut st: St,
) -> Result<DecodeTrace<S>> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(LvrError::Contract("empty prompt".into()));
    }
    let max_len = weights.config.max_seq_len;
    let mut logits = st.step(weights, prompt)?.1;
    let mut h;
    let mut trace = DecodeTrace {
        prompt_len: prompt.len(),
        tokens: Vec::new(),
        token_positions: Vec::new(),
        logprobs: Vec::new(),
        forced: Vec::new(),
        segments: Vec::new(),
        finish: FinishReason::MaxNewTokens,
    };
    let emit = |trace: &mut DecodeTrace<S>, tok: u32, pos: usize, lp: f64, forced: bool| {
        trace.tokens.push(tok);
        trace.token_positions.push(pos);
        trace.logprobs.push(lp);
        trace.forced.push(forced);
    };
    while trace.tokens.len() < cfg.max_new_tokens {
        let tok = sample(&logits, cfg, rng) as u32;
        let pos = st.len();
        emit(&mut trace, tok, pos, logprob(&logits, tok as usize), false);
        if tok == EOS {
            trace.finish = FinishReason::Eos;
            return Ok(trace);
        }
        if st.len() + 1 > max_len {
            trace.finish = FinishReason::Capacity;
            return Ok(trace);
        }
        (h, logits) = st.step(weights, &[MixedElement::TextToken(tok)])?;
        if tok != LVR_START {
            continue;
        }
        let mut seg = LatentSegment { positions: Vec::new(), vectors: Vec::new(), stop: SegmentStop::Cap };
        loop {
            if st.len() + 1 > max_len {
                seg.stop = SegmentStop::Capacity;
                trace.segments.push(seg);
                trace.finish = FinishReason::Capacity;
                return Ok(trace);
            }
            let v = weights.apply_lvr_head(&h);
            seg.positions.push(st.len());
            seg.vectors.push(v.clone());
            (h, logits) = st.step(weights, &[MixedElement::LatentInput(v)])?;
            let steps = seg.vectors.len();
            let stop = match cfg.strategy {
                StopStrategy::FixedToken { k } => stop_fixed(steps, k).then_some(SegmentStop::Fixed),
                StopStrategy::LatentEnd { metric, threshold } => {
                    stop_latent_end(&weights.apply_lvr_head(&h), weights.latent_end(), metric, threshold)
                        .then_some(SegmentStop::LatentEnd)
                }
                StopStrategy::ModeSwitch => stop_mode_switch(&logits).then_some(SegmentStop::ModeSwitch),
            };
            let stop = stop.or((steps >= cfg.max_latent_steps).then_some(SegmentStop::Cap));
            if let Some(reason) = stop {
                seg.stop = reason;
                break;
            }
        }
        trace.segments.push(seg);
        let pos = st.len();
        emit(&mut trace, LVR_END, pos, logprob(&logits, LVR_END as usize), true);
        if st.len() + 1 > max_len {
            trace.finish = FinishReason::Capacity;
            return Ok(trace);
        }
        logits = st.step(weights, &[MixedElement::TextToken(LVR_END)])?.1;
    }
    Ok(trace)
}
