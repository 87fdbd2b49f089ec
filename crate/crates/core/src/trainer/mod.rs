//! The training loop: roll out groups under a snapshot of the policy, turn
//! rewards into per-token weights ρ, take clipped surrogate gradient steps,
//! and periodically evaluate.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! manifest.json            resolved config, formulas, seeds, start time
//! metrics.jsonl            one MetricsRecord per evaluation
//! metrics.csv              step,mean_reward,avg_at_n,pass_at_n,entropy,kl_to_ref,kl_to_opt
//! checkpoints/step_N.json  every `checkpoint_every` steps
//! checkpoints/final.json
//! summary.json             end time, steps run, stop reason
//! ```

mod config;
mod eval;
mod optimizer;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{Algorithm, EvalMode, OptimizerKind, PlateauConfig, RunConfig};
pub use eval::{evaluate, is_enumerable, oracle_solutions, EvalOptions, EvalSummary};
pub use optimizer::Optimizer;

use crate::alphabet::Token;
use crate::env::Task;
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::oracle::OracleSolution;
use crate::policy::{save_checkpoint, surrogate_grad, LossSpec, TabularPolicy};
use crate::prl::{group_advantages, process_advantages, AdvantageConfig};
use crate::trajectory::{write_records, Trajectory, TrajectoryRecord};

const PROMPT_TAG: u64 = 0x243f_6a88_85a3_08d3;
const INIT_TAG: u64 = 0x1319_8a2e_0370_7344;
const BATCH_TAG: u64 = 0xa409_3822_299f_31d0;
const ROLLOUT_TAG: u64 = 0x082e_fa98_ec4e_6c89;
const EVAL_TAG: u64 = 0x4528_21e6_38d0_1377;

/// Seeds of every random stream in a run, all derived from `RunConfig::seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub run: u64,
    pub prompts: u64,
    pub init: u64,
    pub batches: u64,
    pub rollouts: u64,
    pub eval: u64,
}

impl RunSeeds {
    pub fn derive(seed: u64) -> Self {
        RunSeeds {
            run: seed,
            prompts: seed ^ PROMPT_TAG,
            init: seed ^ INIT_TAG,
            batches: seed ^ BATCH_TAG,
            rollouts: seed ^ ROLLOUT_TAG,
            eval: seed ^ EVAL_TAG,
        }
    }
}

/// The formulas a run actually used, spelled out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulaChoice {
    pub rho: String,
    pub future_sum: Option<String>,
    pub segmentation: String,
    pub loss: String,
}

/// Written once, before the first step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub code_version: String,
    pub policy_order: usize,
    pub formulas: FormulaChoice,
    pub seeds: RunSeeds,
    pub start_time_unix_s: f64,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig) -> Self {
        let rho = match cfg.algorithm {
            Algorithm::Prl if cfg.eta.is_infinite() => {
                "rho_t = (r - mean(r)) / (std(r) + std_eps)  [eta = inf]".to_string()
            }
            Algorithm::Prl => cfg.order_mode.formula().to_string(),
            Algorithm::Grpo => "rho_t = (r - mean(r)) / (std(r) + std_eps)".to_string(),
            Algorithm::Reinforce => "rho_t = r".to_string(),
            Algorithm::Raft => format!(
                "rho_t = 1 on rollouts with r >= {}, others dropped",
                cfg.pass_threshold
            ),
        };
        let future_sum = (cfg.algorithm == Algorithm::Prl && cfg.eta.is_finite())
            .then(|| cfg.index_convention.formula().to_string());
        let loss = format!(
            "L = mean_i -(1/L_i) sum_t min(r_t rho_t, clip(r_t, 1-{}, 1+{}) rho_t) + {} KL_t(pi||pi_0) - {} H_t(pi)",
            cfg.clip_low, cfg.clip_high, cfg.beta, cfg.entropy_coef
        );
        RunManifest {
            config: cfg.clone(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            policy_order: cfg.resolved_policy_order(),
            formulas: FormulaChoice {
                rho,
                future_sum,
                segmentation: cfg.segmentation.to_string(),
                loss,
            },
            seeds: RunSeeds::derive(cfg.seed),
            start_time_unix_s: unix_now(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    StepBudget,
    Plateau,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps_run: usize,
    pub stop_reason: StopReason,
    pub end_time_unix_s: f64,
    pub final_metrics: Option<MetricsRecord>,
}

/// What one step did.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: usize,
    pub mean_reward: f64,
    /// Rollouts in prompt-major order, `group_size` per prompt.
    pub batch: Vec<Trajectory>,
    /// ρ per rollout; empty for rollouts a RAFT step dropped.
    pub rho: Vec<Vec<f64>>,
    pub updates: usize,
    pub last_loss: Option<f64>,
    pub clip_fraction: f64,
}

pub struct TrainOutcome {
    pub policy: TabularPolicy,
    pub reference: TabularPolicy,
    pub prompts: Vec<Vec<Token>>,
    pub metrics: Vec<MetricsRecord>,
    pub summary: RunSummary,
}

/// The reference policy π_0 a run starts from.
pub fn initial_policy(cfg: &RunConfig, task: &Task) -> Result<TabularPolicy> {
    let order = cfg.resolved_policy_order();
    let alphabet = task.alphabet().clone();
    let len = task.response_len();
    if cfg.init_scale == 0.0 {
        TabularPolicy::uniform(alphabet, order, len)
    } else {
        TabularPolicy::random(alphabet, order, len, cfg.init_scale, RunSeeds::derive(cfg.seed).init)
    }
}

/// The run's fixed prompt pool.
pub fn prompt_pool(cfg: &RunConfig, task: &Task) -> Result<Vec<Vec<Token>>> {
    task.sample_prompts(cfg.num_prompts, RunSeeds::derive(cfg.seed).prompts, false)
}

/// Holds the state of one run and advances it a step at a time.
pub struct Trainer {
    cfg: RunConfig,
    task: Task,
    seeds: RunSeeds,
    policy: TabularPolicy,
    reference: TabularPolicy,
    prompts: Vec<Vec<Token>>,
    optimizer: Optimizer,
    oracles: Option<Vec<OracleSolution>>,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let task = Task::new(cfg.task.clone())?;
        let seeds = RunSeeds::derive(cfg.seed);
        let policy = initial_policy(&cfg, &task)?;
        let prompts = prompt_pool(&cfg, &task)?;
        let oracles = oracle_solutions(&task, &policy, &prompts, cfg.eta, cfg.oracle_cap)?;
        let optimizer = Optimizer::from_config(&cfg, policy.logits().len());
        Ok(Trainer {
            reference: policy.clone(),
            cfg,
            task,
            seeds,
            policy,
            prompts,
            optimizer,
            oracles,
            step: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn policy(&self) -> &TabularPolicy {
        &self.policy
    }

    pub fn reference(&self) -> &TabularPolicy {
        &self.reference
    }

    pub fn prompts(&self) -> &[Vec<Token>] {
        &self.prompts
    }

    pub fn oracles(&self) -> Option<&[OracleSolution]> {
        self.oracles.as_deref()
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn batch_prompts(&self, step: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seeds.batches);
        rng.set_stream(step as u64);
        if self.cfg.batch_size == self.cfg.num_prompts {
            return (0..self.cfg.num_prompts).collect();
        }
        rand::seq::index::sample(&mut rng, self.cfg.num_prompts, self.cfg.batch_size).into_vec()
    }

    /// Rolls out `group_size` responses for each prompt index under the
    /// current policy. Each prompt slot has its own random stream.
    pub fn rollouts(&self, step: usize, prompt_ids: &[usize]) -> Result<Vec<Trajectory>> {
        let groups = prompt_ids
            .par_iter()
            .enumerate()
            .map(|(slot, &pid)| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seeds.rollouts);
                rng.set_stream(((step as u64) << 32) | slot as u64);
                let prompt = &self.prompts[pid];
                let group_id = (step * self.cfg.batch_size + slot) as u64;
                (0..self.cfg.group_size)
                    .map(|_| {
                        let roll = self.policy.sample_with(prompt, &mut rng)?;
                        let logp_ref = self.reference.logprob(prompt, &roll.response)?;
                        let reward = self.task.reward(prompt, &roll.response)?;
                        Trajectory::new(
                            prompt.clone(),
                            roll.response,
                            roll.logp.clone(),
                            roll.logp,
                            logp_ref,
                            reward,
                            group_id,
                        )
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(groups.into_iter().flatten().collect())
    }

    /// ρ for every rollout of a prompt-major batch.
    pub fn weights(&self, batch: &[Trajectory]) -> Result<Vec<Vec<f64>>> {
        let n = self.cfg.group_size;
        let mut out = Vec::with_capacity(batch.len());
        for group in batch.chunks(n) {
            let rewards: Vec<f64> = group.iter().map(|t| t.reward).collect();
            match self.cfg.algorithm {
                Algorithm::Prl => {
                    let cfg = AdvantageConfig {
                        eta: self.cfg.eta,
                        segmentation: self.cfg.segmentation,
                        order_mode: self.cfg.order_mode,
                        convention: self.cfg.index_convention,
                        std_eps: self.cfg.std_eps,
                        beta: self.cfg.beta,
                    };
                    out.extend(process_advantages(group, &cfg)?.into_iter().map(|a| a.rho));
                }
                Algorithm::Grpo => {
                    let a = group_advantages(&rewards, self.cfg.std_eps)?;
                    out.extend(group.iter().zip(a).map(|(t, a)| vec![a; t.len()]));
                }
                Algorithm::Reinforce => {
                    out.extend(group.iter().map(|t| vec![t.reward; t.len()]));
                }
                Algorithm::Raft => {
                    out.extend(group.iter().map(|t| {
                        if t.reward >= self.cfg.pass_threshold {
                            vec![1.0; t.len()]
                        } else {
                            Vec::new()
                        }
                    }));
                }
            }
        }
        Ok(out)
    }

    /// One iteration: snapshot, roll out, weigh, update.
    pub fn step(&mut self) -> Result<StepReport> {
        let step = self.step + 1;
        let ids = self.batch_prompts(step);
        let batch = self.rollouts(step, &ids)?;
        let rho = self.weights(&batch)?;
        let mean_reward = batch.iter().map(|t| t.reward).sum::<f64>() / batch.len() as f64;

        let keep: Vec<usize> = (0..batch.len())
            .filter(|&i| self.cfg.algorithm != Algorithm::Raft || !rho[i].is_empty())
            .collect();
        let spec = LossSpec {
            clip_low: self.cfg.clip_low,
            clip_high: self.cfg.clip_high,
            beta: self.cfg.beta,
            entropy_coef: self.cfg.entropy_coef,
        };
        let chunk = self.cfg.mini_batch_size.unwrap_or(keep.len()).max(1);
        let mut updates = 0;
        let mut last_loss = None;
        let mut clipped = 0.0;
        for _ in 0..self.cfg.inner_epochs {
            for ids in keep.chunks(chunk) {
                let trajs: Vec<Trajectory> = ids.iter().map(|&i| batch[i].clone()).collect();
                let rhos: Vec<Vec<f64>> = ids.iter().map(|&i| rho[i].clone()).collect();
                let old: Vec<Vec<f64>> = trajs.iter().map(|t| t.logp_old.clone()).collect();
                let out = surrogate_grad(&self.policy, &trajs, &rhos, &old, &spec, Some(&self.reference))?;
                if !out.loss.is_finite() || !out.grad.is_finite() {
                    return Err(self.numeric_failure(step, &batch, &rho, "loss or gradient"));
                }
                self.optimizer.step(&mut self.policy, &out.grad, self.cfg.learning_rate);
                if !self.policy.logits().iter().all(|v| v.is_finite()) {
                    return Err(self.numeric_failure(step, &batch, &rho, "logits after update"));
                }
                updates += 1;
                last_loss = Some(out.loss);
                clipped += out.clip_fraction;
            }
        }
        self.step = step;
        Ok(StepReport {
            step,
            mean_reward,
            batch,
            rho,
            updates,
            last_loss,
            clip_fraction: if updates > 0 { clipped / updates as f64 } else { 0.0 },
        })
    }

    fn numeric_failure(&self, step: usize, batch: &[Trajectory], rho: &[Vec<f64>], what: &str) -> Error {
        let mut msg = format!("non-finite {what} at step {step}");
        if let Some(dir) = &self.cfg.output_dir {
            let path = dir.join(format!("failure_step_{step}.jsonl"));
            let records: Vec<TrajectoryRecord> = batch
                .iter()
                .zip(rho)
                .map(|(t, r)| {
                    let mut rec = TrajectoryRecord::from(t);
                    rec.rho = Some(r.clone());
                    rec
                })
                .collect();
            match fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).and_then(|_| write_records(&path, &records)) {
                Ok(()) => msg.push_str(&format!("; batch dumped to {}", path.display())),
                Err(e) => msg.push_str(&format!("; dump failed: {e}")),
            }
        }
        Error::NonFinite(msg)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            samples_per_prompt: self.cfg.eval_samples_per_prompt,
            mode: self.cfg.eval_mode,
            seed: self.seeds.eval,
            pass_threshold: self.cfg.pass_threshold,
            cap: self.cfg.oracle_cap,
        }
    }

    /// Evaluates the current policy on the prompt pool.
    pub fn evaluate(&self) -> Result<EvalSummary> {
        evaluate(
            &self.policy,
            &self.reference,
            &self.task,
            &self.prompts,
            &self.eval_options(),
            self.oracles.as_deref(),
        )
    }
}

struct Plateau {
    cfg: PlateauConfig,
    history: Vec<f64>,
    best: f64,
    best_step: usize,
}

impl Plateau {
    fn new(cfg: PlateauConfig) -> Self {
        Plateau {
            cfg,
            history: Vec::new(),
            best: f64::NEG_INFINITY,
            best_step: 0,
        }
    }

    /// Records a reward and reports whether training should stop.
    fn observe(&mut self, step: usize, reward: f64) -> bool {
        self.history.push(reward);
        let w = self.cfg.window;
        if self.history.len() < w {
            return false;
        }
        let ma = self.history[self.history.len() - w..].iter().sum::<f64>() / w as f64;
        if ma > self.best + self.cfg.min_delta {
            self.best = ma;
            self.best_step = step;
        }
        step - self.best_step >= self.cfg.patience
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

struct Sinks {
    dir: PathBuf,
    jsonl: BufWriter<File>,
    csv: BufWriter<File>,
}

impl Sinks {
    fn open(dir: &Path, manifest: &RunManifest) -> Result<Self> {
        let ckpt = dir.join("checkpoints");
        fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let mpath = dir.join("manifest.json");
        fs::write(&mpath, serde_json::to_string_pretty(manifest)?).map_err(|e| Error::io(&mpath, e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            File::create(&p).map(BufWriter::new).map_err(|e| Error::io(&p, e))
        };
        let jsonl = create("metrics.jsonl")?;
        let mut csv = create("metrics.csv")?;
        writeln!(csv, "{}", MetricsRecord::CSV_HEADER).map_err(|e| Error::io(dir, e))?;
        Ok(Sinks {
            dir: dir.to_path_buf(),
            jsonl,
            csv,
        })
    }

    fn emit(&mut self, rec: &MetricsRecord) -> Result<()> {
        let dir = &self.dir;
        writeln!(self.jsonl, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(dir, e))?;
        writeln!(self.csv, "{}", rec.csv_row()).map_err(|e| Error::io(dir, e))?;
        self.jsonl.flush().map_err(|e| Error::io(dir, e))?;
        self.csv.flush().map_err(|e| Error::io(dir, e))
    }

    fn checkpoint(&self, policy: &TabularPolicy, name: &str) -> Result<()> {
        save_checkpoint(policy, &self.dir.join("checkpoints").join(name))
    }
}

/// Runs the configured algorithm to its step budget (or plateau) and writes
/// outputs when `output_dir` is set.
pub fn train(cfg: RunConfig) -> Result<TrainOutcome> {
    match cfg.threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| run(cfg)),
        None => run(cfg),
    }
}

/// [`train`] restricted to the outcome-only baselines.
pub fn run_baseline(cfg: RunConfig) -> Result<TrainOutcome> {
    if cfg.algorithm == Algorithm::Prl {
        return Err(Error::Config("run_baseline expects grpo, reinforce or raft".into()));
    }
    train(cfg)
}

fn run(cfg: RunConfig) -> Result<TrainOutcome> {
    let start = Instant::now();
    let manifest = RunManifest::new(&cfg);
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut sinks = match &cfg.output_dir {
        Some(dir) => Some(Sinks::open(dir, &manifest)?),
        None => None,
    };
    let mut plateau = cfg.plateau.map(Plateau::new);
    let mut metrics = Vec::new();
    let mut stop_reason = StopReason::StepBudget;
    let mut last_reward = 0.0;

    let record = |trainer: &Trainer, step: usize, mean_reward: f64| -> Result<MetricsRecord> {
        let e = trainer.evaluate()?;
        Ok(MetricsRecord {
            step,
            mean_reward,
            avg_at_n: e.avg_at_n,
            pass_at_n: e.pass_at_n,
            policy_entropy: e.policy_entropy,
            kl_to_ref: e.kl_to_ref,
            kl_estimator: e.kl_estimator,
            kl_to_opt: e.kl_to_opt,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    };

    for _ in 0..cfg.steps {
        let report = trainer.step()?;
        let step = report.step;
        last_reward = report.mean_reward;
        let stop = plateau
            .as_mut()
            .is_some_and(|p| p.observe(step, report.mean_reward));
        let last = stop || step == cfg.steps;
        if (cfg.eval_every > 0 && step % cfg.eval_every == 0) || last {
            let rec = record(&trainer, step, report.mean_reward)?;
            if let Some(s) = sinks.as_mut() {
                s.emit(&rec)?;
            }
            metrics.push(rec);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            if let Some(s) = &sinks {
                s.checkpoint(trainer.policy(), &format!("step_{step:06}.json"))?;
            }
        }
        if stop {
            stop_reason = StopReason::Plateau;
            break;
        }
    }
    if trainer.steps_done() == 0 {
        let rec = record(&trainer, 0, last_reward)?;
        if let Some(s) = sinks.as_mut() {
            s.emit(&rec)?;
        }
        metrics.push(rec);
    }

    let summary = RunSummary {
        steps_run: trainer.steps_done(),
        stop_reason,
        end_time_unix_s: unix_now(),
        final_metrics: metrics.last().cloned(),
    };
    if let Some(s) = &sinks {
        s.checkpoint(trainer.policy(), "final.json")?;
        let p = s.dir.join("summary.json");
        fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(TrainOutcome {
        policy: trainer.policy,
        reference: trainer.reference,
        prompts: trainer.prompts,
        metrics,
        summary,
    })
}
