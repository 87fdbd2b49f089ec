use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prl_lab::env::Task;
use prl_lab::gradcheck::{exact_objective_check, sampled_batches_check};
use prl_lab::oracle::solve;
use prl_lab::policy::{load_checkpoint, LossSpec, TabularPolicy};
use prl_lab::trainer::{
    evaluate, initial_policy, oracle_solutions, prompt_pool, train, EvalMode, EvalOptions,
    RunConfig, RunSeeds,
};
use prl_lab::trajectory::{write_records, TrajectoryRecord};
use prl_lab::{Error, Token};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "prl", version, about = "Process reward learning on enumerable token tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run config.
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set eta=10 --set task.response_len=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured algorithm and write metrics and checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the config's prompt pool.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference policy; defaults to the config's initial policy.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<EvalMode>,
    },
    /// Solve for the optimal policy of one or more prompts and check its identities.
    Oracle {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated prompt tokens; defaults to the first prompts of the pool.
        #[arg(long, value_delimiter = ',')]
        prompt: Option<Vec<Token>>,
        #[arg(long, default_value_t = 1)]
        num_prompts: usize,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Check the surrogate gradient against finite differences and the exact ∇Q.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 10)]
        batches: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-6)]
        h: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Write rollouts (or bare prompts) as trajectory JSONL.
    GenDataset {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Policy to sample from; defaults to the config's initial policy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        prompts_only: bool,
    },
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    match s {
        "auto" => Ok(EvalMode::Auto),
        "exact" => Ok(EvalMode::Exact),
        "sampled" => Ok(EvalMode::Sampled),
        _ => Err(format!("unknown mode {s:?}; expected auto, exact or sampled")),
    }
}

enum Failure {
    Config(String),
    Numeric(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn load_config(args: &ConfigArgs, extra: Vec<String>) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", args.config.display())))?;
    let mut overrides = args.overrides.clone();
    if let Some(s) = args.seed {
        overrides.push(format!("seed={s}"));
    }
    overrides.extend(extra);
    RunConfig::from_toml_with_overrides(&text, &overrides).map_err(|e| Failure::Config(e.to_string()))
}

fn quoted(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_NUMERIC)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) => ExitCode::from(EXIT_NUMERIC),
                Error::Config(_) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train {
            cfg,
            steps,
            output_dir,
        } => {
            let mut extra = Vec::new();
            if let Some(s) = steps {
                extra.push(format!("steps={s}"));
            }
            if let Some(d) = &output_dir {
                extra.push(format!("output_dir={}", quoted(d)));
            }
            let cfg = load_config(&cfg, extra)?;
            if cfg.output_dir.is_none() {
                return Err(Failure::Config("train needs output_dir (config key or --output-dir)".into()));
            }
            let out = train(cfg)?;
            if let Some(m) = out.metrics.last() {
                println!("{}", serde_json::to_string(m).map_err(Error::from)?);
            }
            Ok(())
        }
        Command::Eval {
            cfg,
            checkpoint,
            reference,
            samples,
            mode,
        } => {
            let cfg = load_config(&cfg, Vec::new())?;
            let task = Task::new(cfg.task.clone())?;
            let policy = load_checkpoint(&checkpoint)?;
            let reference = match reference {
                Some(p) => load_checkpoint(&p)?,
                None => initial_policy(&cfg, &task)?,
            };
            let prompts = prompt_pool(&cfg, &task)?;
            let oracles = oracle_solutions(&task, &reference, &prompts, cfg.eta, cfg.oracle_cap)?;
            let opts = EvalOptions {
                samples_per_prompt: samples.unwrap_or(cfg.eval_samples_per_prompt),
                mode: mode.unwrap_or(cfg.eval_mode),
                seed: RunSeeds::derive(cfg.seed).eval,
                pass_threshold: cfg.pass_threshold,
                cap: cfg.oracle_cap,
            };
            let summary = evaluate(&policy, &reference, &task, &prompts, &opts, oracles.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
            Ok(())
        }
        Command::Oracle {
            cfg,
            prompt,
            num_prompts,
            eta,
            top_k,
        } => {
            let cfg = load_config(&cfg, Vec::new())?;
            let task = Task::new(cfg.task.clone())?;
            let pi0 = initial_policy(&cfg, &task)?;
            let eta = eta.unwrap_or(cfg.eta);
            let prompts = match prompt {
                Some(p) => vec![p],
                None => prompt_pool(&cfg, &task)?.into_iter().take(num_prompts).collect(),
            };
            for p in prompts {
                let sol = solve(&p, &pi0, &task, eta, cfg.oracle_cap)?;
                println!("prompt {p:?}  eta {eta}");
                println!("  Z = {:.12e}  ln Z = {:.12}  C = {:.12}", sol.z(), sol.log_z(), sol.c());
                for (resp, prob) in sol.top_k(top_k) {
                    let r = sol.reward_of(&resp)?;
                    println!("  {resp:?}  pi* = {prob:.9}  r* = {r}");
                }
                let report = sol.residual_report();
                println!("  residuals {}", serde_json::to_string(&report).map_err(Error::from)?);
            }
            Ok(())
        }
        Command::Gradcheck {
            cfg,
            batches,
            batch_size,
            h,
            tolerance,
        } => {
            let cfg = load_config(&cfg, Vec::new())?;
            let task = Task::new(cfg.task.clone())?;
            let pi0 = initial_policy(&cfg, &task)?;
            let prompts = prompt_pool(&cfg, &task)?;
            let spec = LossSpec {
                beta: cfg.beta,
                entropy_coef: cfg.entropy_coef,
                ..LossSpec::unclipped()
            };
            let fd = sampled_batches_check(&pi0, &task, &prompts, &spec, batches, batch_size, h, cfg.seed)?;
            println!("finite differences: {}", serde_json::to_string(&fd).map_err(Error::from)?);
            let mut worst = fd.max_rel_err;
            if cfg.eta.is_finite() {
                let pi = TabularPolicy::random(
                    pi0.alphabet().clone(),
                    pi0.order(),
                    pi0.max_len(),
                    1.0,
                    cfg.seed,
                )?;
                let exact = exact_objective_check(&pi, &pi0, &task, &prompts[0], cfg.eta, cfg.oracle_cap)?;
                println!("exact expectation vs grad Q: {}", serde_json::to_string(&exact).map_err(Error::from)?);
                worst = worst.max(exact.max_rel_err);
            }
            if worst > tolerance {
                return Err(Failure::Numeric(format!(
                    "gradient check failed: relative error {worst:e} > {tolerance:e}"
                )));
            }
            println!("ok (max relative error {worst:e})");
            Ok(())
        }
        Command::GenDataset {
            cfg,
            out,
            checkpoint,
            samples,
            prompts_only,
        } => {
            let cfg = load_config(&cfg, Vec::new())?;
            let task = Task::new(cfg.task.clone())?;
            let reference = initial_policy(&cfg, &task)?;
            let policy = match checkpoint {
                Some(p) => load_checkpoint(&p)?,
                None => reference.clone(),
            };
            let prompts = prompt_pool(&cfg, &task)?;
            let n = samples.unwrap_or(cfg.group_size);
            let mut records = Vec::new();
            let seed = RunSeeds::derive(cfg.seed).rollouts;
            for (gid, prompt) in prompts.iter().enumerate() {
                if prompts_only {
                    records.push(TrajectoryRecord::prompt_only(prompt.clone(), gid as u64));
                    continue;
                }
                for j in 0..n {
                    let roll = policy.sample(prompt, seed ^ ((gid as u64) << 32 | j as u64))?;
                    records.push(TrajectoryRecord {
                        prompt: prompt.clone(),
                        response: roll.response.clone(),
                        logp_cur: roll.logp.clone(),
                        logp_old: roll.logp,
                        logp_ref: reference.logprob(prompt, &roll.response)?,
                        reward: Some(task.reward(prompt, &roll.response)?),
                        group_id: gid as u64,
                        rho: None,
                        segment_boundaries: None,
                    });
                }
            }
            write_records(&out, &records)?;
            println!("wrote {} records to {}", records.len(), out.display());
            Ok(())
        }
    }
}
