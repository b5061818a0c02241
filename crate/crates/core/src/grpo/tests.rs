use super::*;
use crate::data::{generate_dataset, prompt_elements, DataConfig, Dataset, Split};
use crate::decode::{DecodeConfig, SegmentStop};
use crate::model::vocab::{BOS, EOS};
use crate::model::{ModelConfig, ModelWeights, Vocab};
use crate::numerics::{finite_diff_entries_with, Stencil};
use crate::sft::collect_grads;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_data(n: usize) -> Dataset {
    let cfg = DataConfig { patch_size: 4, ..DataConfig::default() };
    generate_dataset(&cfg, &Vocab::new(8, 32).unwrap(), 3, n).unwrap()
}

fn perturb(w: &mut ModelWeights<f64>, scale: f64, seed: u64) {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, scale).unwrap();
    for p in w.params.iter_mut().filter(|p| p.trainable) {
        p.tensor.data.iter_mut().for_each(|x| *x += n.sample(&mut rng));
    }
}

/// Perturbed tiny model that opens a latent block often.
fn policy() -> ModelWeights<f64> {
    let mut w = ModelWeights::<f32>::init(&ModelConfig::tiny(), Vocab::new(8, 32).unwrap()).unwrap().cast::<f64>();
    perturb(&mut w, 0.1, 11);
    let (b, head) = (w.layout.ln_f_b, w.layout.lm_head);
    w.params[b].tensor.data[0] += 1.0;
    w.params[head].tensor.data[LVR_START as usize] += 2.0;
    w.params[head].tensor.data[EOS as usize] += 1.0;
    w
}

fn prompt_of(w: &ModelWeights<f64>, ds: &Dataset, i: usize) -> (Vec<MixedElement<f64>>, Vec<u32>) {
    let tokens = ds.encode(&w.encoder).unwrap();
    let inst = ds.split(Split::Train)[i];
    (prompt_elements(inst, &tokens[inst.image]), inst.answer.clone())
}

fn rl_cfg(group: usize) -> RlConfig {
    RlConfig { group_size: group, decode: DecodeConfig { max_new_tokens: 8, ..RlConfig::default().decode }, ..RlConfig::default() }
}

fn group_with_latents(w: &ModelWeights<f64>, group: usize) -> Group<f64> {
    let ds = tiny_data(4);
    let (prompt, gold) = prompt_of(w, &ds, 0);
    let cfg = rl_cfg(group);
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = rollout_group(w, 0, &prompt, &gold, &cfg.rollout_decode(), &cfg, &mut rng).unwrap();
        if g.records.iter().all(|r| !r.trace.segments.is_empty() && !r.old_logprobs.is_empty()) {
            return g;
        }
    }
    panic!("no group in which every rollout enters latent mode");
}

#[test]
fn reward_examples() {
    let a = 20u32;
    let r = compute_rewards(&[LVR_START, LVR_END, a, EOS], &[a], 1.0, 1.0);
    assert_eq!((r.format, r.accuracy, r.total), (1.0, 1.0, 2.0));
    let r = compute_rewards(&[a, EOS], &[a], 1.0, 1.0);
    assert_eq!((r.format, r.accuracy), (0.0, 1.0));
    let r = compute_rewards(&[LVR_END, LVR_START, a + 1, EOS], &[a], 0.5, 1.0);
    assert_eq!((r.format, r.accuracy, r.total), (0.0, 0.0, 0.0));
    let r = compute_rewards(&[LVR_START, LVR_END, a, a, EOS], &[a], 0.5, 2.0);
    assert_eq!((r.format, r.accuracy, r.total), (1.0, 0.0, 0.5));
}

#[test]
fn advantage_examples() {
    let a = normalize_advantages(&[1.0, 0.0, 1.0, 0.0]);
    assert_eq!(a, vec![1.0, -1.0, 1.0, -1.0]);
    assert_eq!(normalize_advantages(&[2.0; 5]), vec![0.0; 5]);
    let a = normalize_advantages(&[0.0, 0.0, 0.0, 3.0]);
    assert!((a[3] - 3f64.sqrt()).abs() < 1e-12);
}

proptest! {
    #[test]
    fn advantages_are_standardized(r in prop::collection::vec(-5.0f64..5.0, 2..16)) {
        let a = normalize_advantages(&r);
        let n = a.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std < 1e-8 {
            prop_assert!(a.iter().all(|&x| x == 0.0));
        } else {
            prop_assert!((a.iter().sum::<f64>() / n).abs() < 1e-9);
            prop_assert!((a.iter().map(|x| x * x).sum::<f64>() / n - 1.0).abs() < 1e-9);
            for (x, y) in r.iter().zip(&a) {
                prop_assert!((y - (x - mean) / std).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn replay_matches_rollout_logprobs() {
    let w = policy();
    let g = group_with_latents(&w, 4);
    for rec in &g.records {
        let lp = replay_logprobs(&w, rec).unwrap();
        for (a, b) in lp.iter().zip(&rec.old_logprobs) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
    let w32 = w.cast::<f32>();
    let ds = tiny_data(4);
    let tokens = ds.encode(&w32.encoder).unwrap();
    let inst = ds.split(Split::Train)[0];
    let prompt = prompt_elements(inst, &tokens[inst.image]);
    let cfg = rl_cfg(8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = rollout_group(&w32, 0, &prompt, &inst.answer, &cfg.rollout_decode(), &cfg, &mut rng).unwrap();
    for rec in &g.records {
        let lp = replay_logprobs(&w32, rec).unwrap();
        for (a, b) in lp.iter().zip(&rec.old_logprobs) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            assert!(((a - b).exp() - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn latent_vectors_enter_the_replay() {
    let w = policy();
    let g = group_with_latents(&w, 2);
    let mut rec = g.records[0].clone();
    let before = replay_logprobs(&w, &rec).unwrap();
    rec.trace.segments[0].vectors[0].iter_mut().for_each(|x| *x = 0.0);
    let after = replay_logprobs(&w, &rec).unwrap();
    let first_after = rec.trace.segments[0].positions[0];
    let changed = rec
        .sampled_positions()
        .iter()
        .zip(before.iter().zip(&after))
        .filter(|(&p, _)| p > first_after)
        .any(|(_, (a, b))| (a - b).abs() > 1e-9);
    assert!(changed);
}

#[test]
fn loss_excludes_latent_and_forced_positions() {
    let w = policy();
    let g = group_with_latents(&w, 2);
    for rec in &g.records {
        let latent: Vec<usize> = rec.trace.segments.iter().flat_map(|s| s.positions.clone()).collect();
        let pos = rec.sampled_positions();
        assert!(pos.iter().all(|p| !latent.contains(p)));
        let forced = rec.trace.forced.iter().filter(|&&f| f).count();
        assert_eq!(pos.len() + forced, rec.trace.tokens.len());
        // each fixed-budget segment ends with a forced end token
        let fixed = rec.trace.segments.iter().filter(|s| s.stop == SegmentStop::Fixed).count();
        assert_eq!(forced, fixed);
    }
    let mut g = g;
    for r in g.records.iter_mut() {
        r.ref_logprobs = Some(r.old_logprobs.clone());
    }
    let inp = SurrogateInputs::from_groups(&[g.clone()]).unwrap();
    let mut off = 0;
    for r in &g.records {
        let n = r.old_logprobs.len();
        assert!(inp.weight[off..off + n].iter().all(|&x| (x - 1.0 / (n as f64 * 2.0)).abs() < 1e-15));
        off += n;
    }
    // changing the recorded latent vectors does not change which terms enter
    let mut g2 = g.clone();
    for r in g2.records.iter_mut() {
        r.trace.segments[0].vectors.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x *= 2.0));
    }
    let inp2 = SurrogateInputs::from_groups(&[g2]).unwrap();
    assert_eq!(inp.weight, inp2.weight);
}

fn surrogate_value(new: f64, old: f64, reference: f64, adv: f64, eps: f64, beta: f64) -> f64 {
    let mut tape = Tape::<f64>::new();
    let lp = tape.constant(Tensor::new(vec![1], vec![new]).unwrap());
    let inp = SurrogateInputs { old: vec![old], reference: vec![reference], advantage: vec![adv], weight: vec![1.0] };
    let l = grpo_loss(&mut tape, lp, &inp, eps, beta).unwrap();
    tape.value(l).item()
}

#[test]
fn clipped_surrogate_arithmetic() {
    let r = 1.5f64.ln();
    assert!((surrogate_value(r, 0.0, r, 1.0, 0.2, 0.0) + 1.2).abs() < 1e-12);
    assert!((surrogate_value(r, 0.0, r, -1.0, 0.2, 0.0) - 1.5).abs() < 1e-12);
    let r = 0.5f64.ln();
    assert!((surrogate_value(r, 0.0, r, 1.0, 0.2, 0.0) + 0.5).abs() < 1e-12);
    assert!((surrogate_value(r, 0.0, r, -1.0, 0.2, 0.0) - 0.8).abs() < 1e-12);
    // k3 vanishes when the reference agrees with the policy
    assert_eq!(surrogate_value(-1.3, -1.3, -1.3, 0.0, 0.2, 1.0), 0.0);
    // k3 for ref − new = 1
    let k3 = 1f64.exp() - 2.0;
    assert!((surrogate_value(-2.0, -2.0, -1.0, 0.0, 0.2, 0.5) - 0.5 * k3).abs() < 1e-12);
}

#[test]
fn degenerate_group_has_zero_gradient() {
    let w = policy();
    let mut g = group_with_latents(&w, 4);
    for r in g.records.iter_mut() {
        r.ref_logprobs = Some(r.old_logprobs.clone());
    }
    g.advantages = normalize_advantages(&[1.0; 4]);
    let inp = SurrogateInputs::from_groups(&[g.clone()]).unwrap();
    let mut tape = Tape::new();
    let vars = w.bind(&mut tape);
    let recs: Vec<_> = g.records.iter().collect();
    let lp = replay_logprobs_tape(&mut tape, &w, &vars, &recs).unwrap();
    let l = grpo_loss(&mut tape, lp, &inp, 0.2, 0.0).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    tape.backward(l).unwrap();
    for g in collect_grads(&tape, &w, &vars).into_iter().flatten() {
        assert!(g.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn surrogate_gradient_matches_finite_differences() {
    let w = policy();
    let mut g = group_with_latents(&w, 2);
    // move old and reference away from the current policy so ratios and k3 are non-trivial
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for r in g.records.iter_mut() {
        use rand::Rng;
        r.ref_logprobs = Some(r.old_logprobs.iter().map(|x| x + rng.gen_range(-0.3..0.3)).collect());
        r.old_logprobs.iter_mut().for_each(|x| *x += rng.gen_range(-0.1..0.1));
    }
    g.advantages = vec![1.0, -1.0];
    let inp = SurrogateInputs::from_groups(&[g.clone()]).unwrap();
    let mut wm = w.clone();
    let mut params = w.params.clone();
    let entries = finite_diff_entries_with(
        &mut params,
        |p, _| {
            wm.params = p.to_vec();
            let mut tape = Tape::new();
            let vars = wm.bind(&mut tape);
            let recs: Vec<_> = g.records.iter().collect();
            let lp = replay_logprobs_tape(&mut tape, &wm, &vars, &recs)?;
            let l = grpo_loss(&mut tape, lp, &inp, 0.2, 0.04)?;
            let v = tape.value(l).item();
            tape.backward(l)?;
            Ok((v, collect_grads(&tape, &wm, &vars)))
        },
        3e-3,
        13,
        Stencil::Central4,
    )
    .unwrap();
    let err = entries.iter().map(|e| e.relative_error()).fold(0.0, f64::max);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn greedy_rollouts_are_identical() {
    let w = policy();
    let ds = tiny_data(4);
    let (prompt, gold) = prompt_of(&w, &ds, 1);
    let cfg = rl_cfg(5);
    let dc = DecodeConfig { greedy: true, ..cfg.decode.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = rollout_group(&w, 1, &prompt, &gold, &dc, &cfg, &mut rng).unwrap();
    assert_eq!(g.records.len(), 5);
    for r in &g.records[1..] {
        assert_eq!(r.trace, g.records[0].trace);
    }
    assert!(g.advantages.iter().all(|&a| a == 0.0));
    assert_eq!(g.records[0].prompt[0], MixedElement::TextToken(BOS));
}

#[test]
fn training_loop_runs_and_logs() {
    let ds = tiny_data(24);
    let mut policy = ModelWeights::<f32>::init(&ModelConfig::tiny(), Vocab::new(8, 32).unwrap()).unwrap();
    let reference = policy.clone();
    let cfg = RlConfig { iterations: 3, prompts_per_iter: 2, group_size: 4, lr: 1e-3, eval_size: 4, ..rl_cfg(4) };
    let metrics = std::sync::Arc::new(std::sync::Mutex::new(Vec::<u8>::new()));
    struct Sink(std::sync::Arc<std::sync::Mutex<Vec<u8>>>);
    impl std::io::Write for Sink {
        fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().write(b)
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }
    let mut out = RlOutputs { metrics: Some(Box::new(Sink(metrics.clone()))), ..RlOutputs::default() };
    let report = train_rl(&mut policy, &reference, &ds, &cfg, &mut out).unwrap();
    assert_eq!(report.history.len(), 3);
    assert!(report.initial_eval.is_some() && report.final_eval.is_some());
    let text = String::from_utf8(metrics.lock().unwrap().clone()).unwrap();
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in ["iter", "mean_reward", "mean_ratio", "clip_fraction", "kl", "trigger_fraction"] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
    }
    // the encoder is never updated
    assert_eq!(policy.encoder, reference.encoder);
    assert_ne!(policy.params, reference.params);
}

#[test]
fn loss_ignores_logits_at_latent_positions() {
    use rand::Rng;
    let w = policy();
    let mut g = group_with_latents(&w, 3);
    for r in g.records.iter_mut() {
        r.ref_logprobs = Some(r.old_logprobs.iter().map(|x| x - 0.1).collect());
    }
    g.advantages = vec![1.0, 0.5, -1.5];
    let inp = SurrogateInputs::from_groups(&[g.clone()]).unwrap();
    let recs: Vec<_> = g.records.iter().collect();
    let mut tape = Tape::new();
    let vars = w.bind_frozen(&mut tape);
    let rl = replay_logits_tape(&mut tape, &w, &vars, &recs).unwrap();
    let logits = tape.value(rl.logits).clone();
    let loss_with = |tape: &mut Tape<f64>, l: Tensor<f64>| {
        let c = tape.constant(l);
        let lp = gather_logprobs(tape, c, &rl.rows, &rl.tokens).unwrap();
        let loss = grpo_loss(tape, lp, &inp, 0.2, 0.04).unwrap();
        tape.value(loss).item()
    };
    let base = loss_with(&mut tape, logits.clone());
    let v = logits.shape[1];
    let mut perturbed = logits.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut offset = 0;
    let mut touched = 0;
    for r in &g.records {
        for s in &r.trace.segments {
            for &p in &s.positions {
                perturbed.data[(offset + p) * v..(offset + p + 1) * v].iter_mut().for_each(|x| *x += rng.gen_range(-5.0..5.0));
                touched += 1;
            }
        }
        offset += r.elements().len() - 1;
    }
    assert!(touched > 0);
    assert_eq!(loss_with(&mut tape, perturbed), base);
    // perturbing a text-predicting row does move the loss
    let mut text = logits.clone();
    text.data[rl.rows[0] * v + rl.tokens[0] as usize] += 1.0;
    assert_ne!(loss_with(&mut tape, text), base);
}
