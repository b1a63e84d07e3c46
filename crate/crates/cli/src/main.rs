mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bot_core::checkpoint::Checkpoint;
use bot_core::data::{generate_dataset, read_jsonl, write_jsonl};
use bot_core::train::{
    evaluate_detailed, loss_csv, parse_modes, run_ablation, sweep_uncertainty, train, EvalOptions,
};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "bot", version, about = "Hand trajectory and hotspot forecasting experiments")]
struct Cli {
    /// Seed for every random stream; falls back to BOT_SEED, then the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Evaluation worker threads; 1 keeps everything single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// JSON file of dotted keys, e.g. {"train.lr": 0.001}.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// key=value override, applied after the config file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic JSONL dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num: Option<usize>,
    },
    /// Train and write `checkpoint.bin` and `loss.csv`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; prints or writes metrics JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one model per joint mode.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Held-out set; defaults to the training data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long, default_value = "individual,hand,object,bidirectional,biprogressive")]
        modes: String,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over an alpha x beta grid; writes sweep.json and sweep.csv.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,1.5,2,3")]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        betas: Vec<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Sampling {
    /// K, the number of stochastic samples.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

/// Failures of this kind exit with 1; everything else with 2.
#[derive(Debug)]
struct UsageError(anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| UsageError(e).into())
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(UsageError(anyhow::anyhow!("input file {} does not exist", p.display())).into());
    }
    Ok(())
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var("BOT_SEED") {
        Ok(s) => usage(s.trim().parse().map(Some).with_context(|| format!("BOT_SEED=`{s}` is not an integer"))),
        Err(_) => Ok(None),
    }
}

fn write_json(path: Option<&Path>, v: Value) -> Result<()> {
    let text = serde_json::to_string_pretty(&config::fixed(v))? + "\n";
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut entries = match &cli.config {
        Some(p) => {
            require_file(p)?;
            usage(config::read_file(p))?
        }
        None => Vec::new(),
    };
    for o in &cli.overrides {
        entries.push(usage(config::parse_override(o))?);
    }
    let mut s = usage(config::build(&entries))?;
    if let Some(seed) = cli.seed.map_or_else(seed_from_env, |s| Ok(Some(s)))? {
        s.gen.seed = seed;
        s.train.seed = seed;
    }
    if cli.threads == 0 {
        return usage(Err(anyhow::anyhow!("--threads must be >= 1")));
    }
    let eval_opts = |samples: Option<usize>, alpha: Option<f64>, beta: Option<f64>| EvalOptions {
        samples: samples.unwrap_or(s.train.samples),
        alpha: alpha.unwrap_or(s.train.alpha),
        beta: beta.unwrap_or(s.train.beta),
        seed: s.train.seed,
        threads: cli.threads,
    };

    match &cli.cmd {
        Command::Gen { out, num } => {
            let gen = match num {
                Some(n) => s.gen.clone().with_total(*n),
                None => s.gen.clone(),
            };
            let data = generate_dataset(&gen)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_jsonl(out, &data)?;
            log::info!("wrote {} sequences to {}", data.len(), out.display());
        }
        Command::Train { data, out } => {
            require_file(data)?;
            let records = read_jsonl(data)?;
            let outcome = train(&records, &s.model, &s.train)?;
            fs::create_dir_all(out)?;
            outcome.checkpoint.save(out.join("checkpoint.bin"))?;
            fs::write(out.join("loss.csv"), loss_csv(&outcome.curve))?;
            log::info!("trained {} steps; wrote {}", outcome.checkpoint.step, out.display());
        }
        Command::Eval { ckpt, data, sampling, out } => {
            require_file(ckpt)?;
            require_file(data)?;
            let c = Checkpoint::load(ckpt)?;
            let records = read_jsonl(data)?;
            let opts = eval_opts(sampling.samples, sampling.alpha, sampling.beta);
            if opts.samples == 0 {
                return usage(Err(anyhow::anyhow!("--samples must be >= 1")));
            }
            let ev = evaluate_detailed(&c, &records, &opts)?;
            write_json(
                out.as_deref(),
                json!({
                    "metrics": ev.report,
                    "static_baseline": { "ade": ev.static_ade, "fde": ev.static_fde },
                    "alpha": opts.alpha,
                    "beta": opts.beta,
                    "seed": opts.seed,
                }),
            )?;
        }
        Command::Ablate { data, eval_data, modes, samples, out } => {
            let modes = usage(parse_modes(modes).map_err(Into::into))?;
            require_file(data)?;
            let train_set = read_jsonl(data)?;
            let eval_set = match eval_data {
                Some(p) => {
                    require_file(p)?;
                    read_jsonl(p)?
                }
                None => train_set.clone(),
            };
            let rows = run_ablation(&train_set, &eval_set, &s.model, &s.train, &modes, &eval_opts(*samples, None, None))?;
            write_json(out.as_deref(), serde_json::to_value(rows)?)?;
        }
        Command::Sweep { ckpt, data, alphas, betas, samples, out } => {
            require_file(ckpt)?;
            require_file(data)?;
            if alphas.is_empty() || betas.is_empty() {
                return usage(Err(anyhow::anyhow!("--alphas and --betas must be non-empty")));
            }
            let c = Checkpoint::load(ckpt)?;
            let records = read_jsonl(data)?;
            let k = samples.unwrap_or(s.train.samples);
            let rows = sweep_uncertainty(&c, &records, alphas, betas, k, s.train.seed, cli.threads)?;
            fs::create_dir_all(out)?;
            write_json(Some(&out.join("sweep.json")), serde_json::to_value(&rows)?)?;
            let mut csv = String::from("alpha,beta,ade,fde\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{:.9e},{:.9e}\n", r.alpha, r.beta, r.ade, r.fde));
            }
            fs::write(out.join("sweep.csv"), csv)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
