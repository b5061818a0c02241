use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate, DecodeConfig, StopStrategy};
use crate::data::{bbox_to_patch_indices, prompt_elements, SftInstance, TaskKind};
use crate::error::Result;
use crate::model::vocab::{EOS, LVR_END};
use crate::model::ModelWeights;
use crate::numerics::Real;

/// Tokens after the last `<|lvr_end|>` (the whole response if there is none),
/// up to the first EOS.
pub fn extract_answer(tokens: &[u32]) -> &[u32] {
    let start = tokens.iter().rposition(|&t| t == LVR_END).map_or(0, |i| i + 1);
    let rest = &tokens[start..];
    let end = rest.iter().position(|&t| t == EOS).unwrap_or(rest.len());
    &rest[..end]
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub per_task: BTreeMap<String, TaskAccuracy>,
    pub mean_latent_steps: f64,
    pub trigger_rate: f64,
}

/// Exact-match evaluation of `instances`. `visual_tokens[i]` are the tokens of
/// image `i`. With `roi_budget` and a FixedToken strategy, each instance uses
/// K = number of ROI patches.
pub fn batch_eval<S: Real>(
    weights: &ModelWeights<S>,
    instances: &[&SftInstance],
    visual_tokens: &[Vec<Vec<S>>],
    image_shape: [usize; 3],
    cfg: &DecodeConfig,
    roi_budget: bool,
) -> Result<EvalReport> {
    let results: Vec<(TaskKind, bool, usize, bool)> = instances
        .par_iter()
        .map(|inst| {
            let mut c = cfg.clone();
            if roi_budget {
                if let StopStrategy::FixedToken { .. } = c.strategy {
                    let k = bbox_to_patch_indices(&inst.bbox, image_shape[1], image_shape[2], weights.config.patch_size)?.len();
                    c.strategy = StopStrategy::FixedToken { k };
                    c.max_latent_steps = c.max_latent_steps.max(k);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ inst.id as u64);
            let prompt = prompt_elements(inst, &visual_tokens[inst.image]);
            let trace = generate(weights, &prompt, &c, &mut rng)?;
            let ok = extract_answer(&trace.tokens) == inst.answer.as_slice();
            Ok((inst.task, ok, trace.latent_steps(), trace.triggered()))
        })
        .collect::<Result<_>>()?;
    let mut report = EvalReport { n: results.len(), ..EvalReport::default() };
    if results.is_empty() {
        return Ok(report);
    }
    let mut correct = 0;
    for &(task, ok, steps, trig) in &results {
        let key = serde_json::to_value(task).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let e = report.per_task.entry(key).or_default();
        e.n += 1;
        e.correct += usize::from(ok);
        correct += usize::from(ok);
        report.mean_latent_steps += steps as f64;
        report.trigger_rate += f64::from(u8::from(trig));
    }
    for e in report.per_task.values_mut() {
        e.accuracy = e.correct as f64 / e.n as f64;
    }
    let n = results.len() as f64;
    report.accuracy = correct as f64 / n;
    report.mean_latent_steps /= n;
    report.trigger_rate /= n;
    Ok(report)
}

/// One row of a latent-budget sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    /// The FixedToken budget, or `None` for the base strategy.
    pub steps: Option<usize>,
    pub strategy: StopStrategy,
    pub report: EvalReport,
}

/// Evaluates `instances` once per FixedToken budget in `steps`, or once with
/// the base strategy when `steps` is empty.
pub fn eval_sweep<S: Real>(
    weights: &ModelWeights<S>,
    instances: &[&SftInstance],
    visual_tokens: &[Vec<Vec<S>>],
    image_shape: [usize; 3],
    base: &DecodeConfig,
    steps: &[usize],
    roi_budget: bool,
) -> Result<Vec<SweepRow>> {
    let mut runs = Vec::new();
    if steps.is_empty() {
        runs.push((None, base.clone()));
    }
    for &k in steps {
        let mut d = base.clone();
        d.strategy = StopStrategy::FixedToken { k };
        d.max_latent_steps = d.max_latent_steps.max(k);
        runs.push((Some(k), d));
    }
    runs.into_iter()
        .map(|(k, d)| {
            let report = batch_eval(weights, instances, visual_tokens, image_shape, &d, roi_budget)?;
            Ok(SweepRow { steps: k, strategy: d.strategy, report })
        })
        .collect()
}
