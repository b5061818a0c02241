use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
d_model = 32
n_layers = 1
n_heads = 2
vocab_size = 32
max_seq_len = 48
patch_size = 4

[data]
patch_size = 4

[sft]
steps = 6
l_max = 200
lr = 1e-3
eval_size = 8

[rl]
iterations = 2
prompts_per_iter = 2
group_size = 3
eval_size = 4

[rl.decode]
max_new_tokens = 6

[decode]
max_new_tokens = 6

[io]
threads = 1
"#;

fn lvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lvr")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lvr(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--n", "40", "--seed", "3"]);
    (cfg, data.join("manifest.jsonl"))
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = walk(dir).into_iter().map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap())).collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn gen_data_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let a = t.path().join("a");
    let b = t.path().join("b");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&a), "--n", "30", "--seed", "9"]);
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&b), "--n", "30", "--seed", "9"]);
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    // the resolved configs record different paths; everything else is identical
    let strip = |v: Vec<(String, Vec<u8>)>| v.into_iter().filter(|(n, _)| n != "resolved_config.toml").collect::<Vec<_>>();
    assert!(fa.len() > 2);
    assert_eq!(strip(fa), strip(fb));
}

#[test]
fn config_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("bad.toml");
    fs::write(&cfg, "[sft]\nlamda_lvr = 1.0\n").unwrap();
    let out = lvr(&["gen-data", "--config", s(&cfg), "--out", s(t.path()), "--n", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).lines().last().unwrap().starts_with("E_CONFIG "));
    let out = lvr(&["train-sft", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_manifest_exits_3() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, manifest) = setup(t.path());
    let mut text = fs::read_to_string(&manifest).unwrap();
    text.push_str("{not json\n");
    fs::write(&manifest, text).unwrap();
    let out = lvr(&["train-sft", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&t.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).lines().last().unwrap().starts_with("E_FORMAT "));
}

#[test]
fn pipeline_train_eval_decode_rl() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, manifest) = setup(t.path());
    let run = t.path().join("sft");
    ok(&["train-sft", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&run)]);
    for f in ["metrics.jsonl", "final.ckpt", "resolved_config.toml"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    for key in ["L_NTP", "L_LVR", "L_total"] {
        assert!(metrics.lines().next().unwrap().contains(key));
    }

    // rerunning from the resolved config reproduces the metrics bit for bit
    let rerun = t.path().join("sft2");
    ok(&["train-sft", "--config", s(&run.join("resolved_config.toml")), "--out", s(&rerun)]);
    assert_eq!(fs::read(run.join("metrics.jsonl")).unwrap(), fs::read(rerun.join("metrics.jsonl")).unwrap());
    assert_eq!(fs::read(run.join("final.ckpt")).unwrap(), fs::read(rerun.join("final.ckpt")).unwrap());

    let ckpt = run.join("final.ckpt");
    let eval = ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--data", s(&manifest), "--steps", "4,8,16"]);
    let rows: Vec<serde_json::Value> = eval.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3);
    for (row, k) in rows.iter().zip([4, 8, 16]) {
        assert_eq!(row["steps"], k);
        let acc = row["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    let trace = ok(&["decode", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--data", s(&manifest), "--instance-id", "0", "--dump-latents"]);
    assert!(trace.contains("finish:") && trace.contains("answer:"));

    let rl = t.path().join("rl");
    let out = ok(&["train-rl", "--config", s(&cfg), "--init-checkpoint", s(&ckpt), "--data", s(&manifest), "--out", s(&rl)]);
    let summary: serde_json::Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
    assert_eq!(summary["iterations"], 2);
    let m = fs::read_to_string(rl.join("metrics.jsonl")).unwrap();
    assert_eq!(m.lines().count(), 2);
    for key in ["mean_reward", "mean_format", "mean_accuracy", "mean_ratio", "clip_fraction", "kl", "trigger_fraction"] {
        assert!(m.contains(key), "{key}");
    }
    assert!(rl.join("final.ckpt").exists());
}

#[test]
fn missing_checkpoint_is_a_config_error() {
    let t = tempfile::tempdir().unwrap();
    let (cfg, manifest) = setup(t.path());
    let out = lvr(&["eval", "--config", s(&cfg), "--data", s(&manifest)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_passes_on_the_tiny_model() {
    let out = ok(&["grad-check", "--target", "sft", "--tiny", "--stride", "61"]);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["pass"], true);
    assert!(v["max_relative_error"].as_f64().unwrap() < 1e-4);
    let out = ok(&["grad-check", "--target", "rl", "--tiny", "--stride", "61"]);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["pass"], true);
}
