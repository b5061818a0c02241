//! `lvr`: data generation, SFT, latent GRPO, evaluation, decoding and
//! gradient checks driven by one TOML config plus flag overrides.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lvr::checks::{rl_grad_check, sft_grad_check, GradCheckOptions};
use lvr::config::RunConfig;
use lvr::data::{generate_dataset, prompt_elements, read_manifest, write_manifest, Dataset, Split};
use lvr::decode::{eval_sweep, extract_answer, generate};
use lvr::grpo::{train_rl, RlOutputs};
use lvr::model::vocab::LVR_END;
use lvr::model::{load_checkpoint, ModelConfig, ModelWeights};
use lvr::sft::{train_sft, SftOutputs};
use lvr::{LvrError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "lvr", version, about = "Latent visual reasoning lab")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the command's own stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Heldout,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Sft,
    Rl,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: manifest plus image files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Supervised training from a fresh initialization.
    TrainSft {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Latent GRPO from an SFT checkpoint, which also serves as the reference policy.
    TrainRl {
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact-match accuracy; one row per fixed latent budget in `--steps`.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "heldout")]
        split: SplitArg,
        /// FixedToken budgets; without it the [decode] strategy is used once.
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        steps: Vec<usize>,
        /// With FixedToken, K = number of ROI patches of each instance.
        #[arg(long)]
        roi_budget: bool,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Decode one instance and print the interleaved trace.
    Decode {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        instance_id: usize,
        #[arg(long)]
        dump_latents: bool,
    },
    /// Finite-difference check of an objective's gradient in f64.
    GradCheck {
        #[arg(long, value_enum)]
        target: Target,
        /// Use the tiny model (d 32, one layer, vocab 32) with 4-pixel patches.
        #[arg(long)]
        tiny: bool,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Central-difference step.
        #[arg(long, default_value_t = 3e-3)]
        eps: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one line: code, then the detail with any line breaks folded
            let detail: Vec<String> = e.to_string().lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
            eprintln!("{} {}", e.code(), detail.join(" "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cfg.io.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.io.threads)
            .build_global()
            .map_err(|e| LvrError::Config(e.to_string()))?;
    }
    let seed = cli.seed;
    match cli.cmd {
        Command::GenData { out, n } => gen_data(&mut cfg, &out, n, seed),
        Command::TrainSft { data, out } => {
            set(&mut cfg.io.data, data);
            set(&mut cfg.io.out, out);
            if let Some(s) = seed {
                cfg.sft.seed = s;
                cfg.model.seed = s;
            }
            cmd_train_sft(&cfg)
        }
        Command::TrainRl { init_checkpoint, data, out } => {
            set(&mut cfg.io.checkpoint, init_checkpoint);
            set(&mut cfg.io.data, data);
            set(&mut cfg.io.out, out);
            if let Some(s) = seed {
                cfg.rl.seed = s;
            }
            cmd_train_rl(&cfg)
        }
        Command::Eval { checkpoint, data, split, steps, roi_budget, limit } => {
            set(&mut cfg.io.checkpoint, checkpoint);
            set(&mut cfg.io.data, data);
            if let Some(s) = seed {
                cfg.decode.seed = s;
            }
            cmd_eval(&cfg, split, &steps, roi_budget, limit)
        }
        Command::Decode { checkpoint, data, instance_id, dump_latents } => {
            set(&mut cfg.io.checkpoint, checkpoint);
            set(&mut cfg.io.data, data);
            if let Some(s) = seed {
                cfg.decode.seed = s;
            }
            cmd_decode(&cfg, instance_id, dump_latents)
        }
        Command::GradCheck { target, tiny, stride, tolerance, eps } => {
            if tiny {
                cfg.model = ModelConfig::tiny();
                cfg.data.patch_size = cfg.model.patch_size;
            }
            let opts = GradCheckOptions { stride, eps, seed: seed.unwrap_or(GradCheckOptions::default().seed), ..GradCheckOptions::default() };
            cmd_grad_check(&cfg, target, &opts, tolerance)
        }
    }
}

fn set<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| LvrError::Config(format!("{what} not given (flag or [io] section)")))
}

fn jsonl(path: &Path) -> Result<Box<dyn Write>> {
    Ok(Box::new(BufWriter::new(File::create(path)?)))
}

fn gen_data(cfg: &mut RunConfig, out: &Path, n: usize, seed: Option<u64>) -> Result<()> {
    cfg.validate()?;
    let seed = seed.unwrap_or(0);
    let vocab = cfg.vocab()?;
    let ds = generate_dataset(&cfg.data, &vocab, seed, n)?;
    let manifest = out.join("manifest.jsonl");
    write_manifest(&manifest, &ds)?;
    cfg.io.data = Some(manifest.clone());
    cfg.persist(out)?;
    println!("{}", serde_json::json!({ "manifest": manifest, "instances": ds.instances.len(), "images": ds.images.len(), "seed": seed }));
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    read_manifest(required(&cfg.io.data, "dataset manifest")?)
}

fn load_weights(cfg: &RunConfig) -> Result<ModelWeights<f32>> {
    let w = load_checkpoint(required(&cfg.io.checkpoint, "checkpoint")?)?;
    if w.config != cfg.model {
        log::info!("using the model configuration stored in the checkpoint");
    }
    Ok(w)
}

fn cmd_train_sft(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let out = required(&cfg.io.out, "output directory")?;
    let ds = load_data(cfg)?;
    cfg.persist(out)?;
    let mut weights = ModelWeights::<f32>::init(&cfg.model, cfg.vocab()?)?;
    let mut outputs = SftOutputs { metrics: Some(jsonl(&out.join("metrics.jsonl"))?), checkpoint_dir: Some(out.to_path_buf()) };
    let report = train_sft(&mut weights, &ds, &cfg.sft, &mut outputs)?;
    drop(outputs);
    let first = report.first().cloned();
    let last = report.last().cloned();
    println!(
        "{}",
        serde_json::json!({
            "steps": report.history.len(),
            "first": first,
            "last": last,
            "skipped": report.skipped,
            "final_eval": report.final_eval,
            "checkpoint": out.join("final.ckpt"),
        })
    );
    Ok(())
}

fn cmd_train_rl(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let out = required(&cfg.io.out, "output directory")?;
    let ds = load_data(cfg)?;
    let mut policy = load_weights(cfg)?;
    let reference = policy.clone();
    cfg.persist(out)?;
    let mut outputs = RlOutputs {
        metrics: Some(jsonl(&out.join("metrics.jsonl"))?),
        rollouts: if cfg.io.dump_rollouts { Some(jsonl(&out.join("rollouts.jsonl"))?) } else { None },
        checkpoint_dir: Some(out.to_path_buf()),
    };
    let report = train_rl(&mut policy, &reference, &ds, &cfg.rl, &mut outputs)?;
    drop(outputs);
    println!(
        "{}",
        serde_json::json!({
            "iterations": report.history.len(),
            "last": report.history.last(),
            "initial_eval": report.initial_eval,
            "final_eval": report.final_eval,
            "checkpoint": out.join("final.ckpt"),
        })
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, split: SplitArg, steps: &[usize], roi_budget: bool, limit: Option<usize>) -> Result<()> {
    cfg.validate()?;
    let weights = load_weights(cfg)?;
    let ds = load_data(cfg)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Heldout => Split::HeldOut,
    };
    let mut insts = ds.split(split);
    insts.truncate(limit.unwrap_or(usize::MAX));
    if insts.is_empty() {
        return Err(LvrError::Contract("no instances in the requested split".into()));
    }
    let tokens = ds.encode(&weights.encoder)?;
    let shape = ds.image_shape(insts[0]);
    for row in eval_sweep(&weights, &insts, &tokens, shape, &cfg.decode, steps, roi_budget)? {
        let r = &row.report;
        println!(
            "{}",
            serde_json::json!({
                "steps": row.steps,
                "strategy": row.strategy,
                "n": r.n,
                "accuracy": r.accuracy,
                "per_task": r.per_task,
                "mean_latent_steps": r.mean_latent_steps,
                "trigger_rate": r.trigger_rate,
            })
        );
    }
    Ok(())
}

fn cmd_decode(cfg: &RunConfig, id: usize, dump_latents: bool) -> Result<()> {
    cfg.validate()?;
    let weights = load_weights(cfg)?;
    let ds = load_data(cfg)?;
    let inst = ds.instances.iter().find(|i| i.id == id).ok_or_else(|| LvrError::Contract(format!("no instance with id {id}")))?;
    let tokens = ds.encode(&weights.encoder)?;
    let prompt = prompt_elements(inst, &tokens[inst.image]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.decode.seed ^ id as u64);
    let trace = generate(&weights, &prompt, &cfg.decode, &mut rng)?;
    let v = &weights.vocab;
    println!("instance {id} ({:?}, {:?})", inst.task, inst.split);
    println!("question: {}", v.decode(&inst.question));
    println!("bbox: {:?}", inst.bbox);
    println!("prompt: {} positions ({} visual tokens)", trace.prompt_len, tokens[inst.image].len());
    let mut segs = trace.segments.iter().peekable();
    for (i, (&t, &p)) in trace.tokens.iter().zip(&trace.token_positions).enumerate() {
        while let Some(s) = segs.next_if(|s| s.positions.first().is_some_and(|&q| q < p)) {
            for (j, (&q, vec)) in s.positions.iter().zip(&s.vectors).enumerate() {
                let norm = vec.iter().map(|x| x * x).sum::<f32>().sqrt();
                if dump_latents {
                    println!("  {q:>4}  latent {j}  |h| {norm:.4}  {vec:?}");
                } else {
                    println!("  {q:>4}  latent {j}  |h| {norm:.4}");
                }
            }
            println!("        stop: {:?}", s.stop);
        }
        let forced = if trace.forced[i] { "  (forced)" } else { "" };
        println!("  {p:>4}  {:<14} logp {:>9.4}{forced}", v.token(t), trace.logprobs[i]);
    }
    for s in segs {
        for (&q, _) in s.positions.iter().zip(&s.vectors) {
            println!("  {q:>4}  latent");
        }
        println!("        stop: {:?}", s.stop);
    }
    let answer = extract_answer(&trace.tokens);
    println!("finish: {:?}", trace.finish);
    println!("answer: {:?}  gold: {:?}  correct: {}", v.decode(answer), v.decode(&inst.answer), answer == inst.answer.as_slice());
    println!("latent steps: {}  closed blocks: {}", trace.latent_steps(), trace.tokens.iter().filter(|&&t| t == LVR_END).count());
    Ok(())
}

fn cmd_grad_check(cfg: &RunConfig, target: Target, opts: &GradCheckOptions, tolerance: f64) -> Result<()> {
    cfg.validate()?;
    let (name, report) = match target {
        Target::Sft => ("sft", sft_grad_check(&cfg.model, &cfg.data, &cfg.sft, opts)?),
        Target::Rl => ("rl", rl_grad_check(&cfg.model, &cfg.data, &cfg.rl, opts)?),
    };
    let pass = report.max_relative_error < tolerance;
    println!(
        "{}",
        serde_json::json!({
            "target": name,
            "max_relative_error": report.max_relative_error,
            "entries_checked": report.entries_checked,
            "worst_param": report.worst_param,
            "worst_index": report.worst_index,
            "worst_analytic": report.worst_analytic,
            "worst_numeric": report.worst_numeric,
            "tolerance": tolerance,
            "pass": pass,
        })
    );
    if pass {
        Ok(())
    } else {
        Err(LvrError::Numeric(format!("gradient check: max relative error {:e} ≥ {tolerance:e}", report.max_relative_error)))
    }
}
