//! Command-line front end and run-directory plumbing.
//!
//! Every run directory gets `config.resolved`, `seeds.json`, its metrics,
//! and its artifacts. A `.lock` file guards the directory while the run is
//! live.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffcore::{config_hash, Checkpoint};
use crate::error::{Error, Result};
use crate::oracle::{run_check, AuditScale, Check, OracleReport};
use crate::policy_opt::Method;
use crate::tasks::{generate, write_dataset, TaskKind};
use crate::trainer::{
    eval_pool, evaluate, init_checkpoint, pretrain, pretrain_pool, read_metrics, rl_train,
    train_pool, write_plot_csv, EvalReport, JsonlWriter, MetricsRecord, PretrainEnd, Resolved,
    RunConfig, RunState, TimingRecord,
};

/// Default output root when `--out` is not given.
pub const OUT_ENV: &str = "DLMWPO_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "dlmwpo",
    version,
    about = "Weighted policy optimization for masked-diffusion models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct RunArgs {
    /// Flat key = value config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Config overrides, `key=value`, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory (default: $DLMWPO_OUT/<command>-seed<seed>, else ./runs/...).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Writes a JSONL dataset of task instances.
    GenData {
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Pretrains on the negative ELBO.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
    },
    /// RL fine-tuning from a checkpoint.
    RlTrain {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        method: Method,
        /// Starting checkpoint (default: fresh initialization).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Greedy evaluation on held-out prompts.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Runs exact oracle audits and writes a JSON report.
    Oracle {
        #[arg(long, default_value = "all")]
        check: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Smaller instance counts.
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rolling-window CSV from a metrics file.
    PlotData {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Holds `<dir>/.lock` for its lifetime.
pub struct RunDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn acquire(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock = path.join(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| Error::io(&lock, e))?;
        Ok(RunDir {
            path: path.to_path_buf(),
            lock,
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write(&self, name: &str, contents: &[u8]) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, contents).map_err(|e| Error::io(p, e))
    }

    /// Writes `config.resolved` and `seeds.json`.
    pub fn record_config(&self, cfg: &RunConfig, r: &Resolved) -> Result<()> {
        self.write("config.resolved", cfg.render().as_bytes())?;
        let seeds = serde_json::json!({
            "seed": r.seed,
            "data_seed": r.data_seed,
            "eval_seed": r.eval_seed,
        });
        self.write("seeds.json", format!("{seeds:#}\n").as_bytes())
    }

    pub fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.write(name, format!("{text}\n").as_bytes())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

fn default_dir(command: &str, seed: u64) -> PathBuf {
    let root = std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(format!("{command}-seed{seed}"))
}

/// Loads the config file, then applies overrides and the seed flag.
pub fn load_config(args: &RunArgs, extra: &[(&str, String)]) -> Result<(RunConfig, Resolved)> {
    let mut cfg = RunConfig::load(&args.config)?;
    for kv in &args.overrides {
        cfg.apply_override(kv)?;
    }
    for (k, v) in extra {
        cfg.set(k, v)?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    let r = cfg.resolve()?;
    Ok((cfg, r))
}

/// Pretraining into `dir`: `metrics.jsonl` and `checkpoint.bin`. On
/// divergence the last good checkpoint is still written and the error is
/// returned.
pub fn run_pretrain(cfg: &RunConfig, r: &Resolved, dir: &RunDir) -> Result<Checkpoint> {
    dir.record_config(cfg, r)?;
    let hash = config_hash(&cfg.render());
    let pool = pretrain_pool(r)?;
    let mut metrics = JsonlWriter::create(&dir.file("metrics.jsonl"))?;
    let end = pretrain(r, init_checkpoint(r, &hash)?, &pool, &mut |rec| {
        metrics.append(rec)
    })?;
    metrics.flush()?;
    match end {
        PretrainEnd::Done(ckpt) => {
            ckpt.save(&dir.file("checkpoint.bin"))?;
            Ok(ckpt)
        }
        PretrainEnd::Diverged { last_good, error } => {
            last_good.save(&dir.file("checkpoint.bin"))?;
            Err(error)
        }
    }
}

/// RL into `dir`: `metrics.jsonl`, `timing.jsonl`, `checkpoint.bin`.
pub fn run_rl(cfg: &RunConfig, r: &Resolved, init: &Checkpoint, dir: &RunDir) -> Result<RunState> {
    dir.record_config(cfg, r)?;
    let hash = config_hash(&cfg.render());
    let pool = train_pool(r)?;
    let mut st = RunState::new(r, init)?;
    let mut metrics = JsonlWriter::create(&dir.file("metrics.jsonl"))?;
    let mut timing = JsonlWriter::create(&dir.file("timing.jsonl"))?;
    let start = Instant::now();
    let mut last = start;
    let mut last_global = u64::MAX;
    let tokens_per_global =
        (r.train.prompts_per_step * r.train.num_generations * r.train.sampling.gen_length) as f64;
    rl_train(r, &mut st, &pool, &mut |rec: &MetricsRecord| {
        metrics.append(rec)?;
        if rec.global_step != last_global {
            let now = Instant::now();
            let dt = now.duration_since(last).as_secs_f64().max(1e-9);
            timing.append(&TimingRecord {
                step: rec.step,
                elapsed_secs: now.duration_since(start).as_secs_f64(),
                tokens_per_sec: tokens_per_global / dt,
            })?;
            last = now;
            last_global = rec.global_step;
        }
        Ok(())
    })?;
    metrics.flush()?;
    timing.flush()?;
    st.checkpoint(r, &hash).save(&dir.file("checkpoint.bin"))?;
    Ok(st)
}

pub fn run_eval(
    cfg: &RunConfig,
    r: &Resolved,
    ckpt: &Checkpoint,
    dir: &RunDir,
) -> Result<EvalReport> {
    dir.record_config(cfg, r)?;
    let report = evaluate(ckpt, &r.train.sampling, &eval_pool(r)?, r.max_prompt_length)?;
    dir.write_json("eval_report.json", &report)?;
    Ok(report)
}

/// Runs the named audits; `check` is one name or `all`.
pub fn run_oracle(check: &str, seed: u64, scale: &AuditScale) -> Result<Vec<OracleReport>> {
    let checks: Vec<Check> = if check == "all" {
        Check::ALL.to_vec()
    } else {
        vec![check.parse()?]
    };
    checks
        .into_iter()
        .map(|c| run_check(c, seed, scale))
        .collect()
}

fn usage_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::Io { .. } | Error::Json(_))
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    if usage_error(e) {
        EXIT_USAGE
    } else {
        EXIT_FAILURE
    }
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => report(&e),
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenData {
            task,
            n,
            seed,
            output,
        } => {
            let inst = generate(task, &mut ChaCha8Rng::seed_from_u64(seed), n)?;
            write_dataset(&output, &inst)?;
            println!(
                "wrote {} {task} instances to {}",
                inst.len(),
                output.display()
            );
            Ok(EXIT_OK)
        }
        Command::Pretrain { run } => {
            // config problems surface before any directory exists
            let (cfg, r) = load_config(&run, &[])?;
            let dir = RunDir::acquire(
                &run.out
                    .clone()
                    .unwrap_or_else(|| default_dir("pretrain", r.seed)),
            )?;
            let ckpt = match run_pretrain(&cfg, &r, &dir) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return Ok(EXIT_FAILURE);
                }
            };
            println!(
                "pretrained {} steps -> {}",
                ckpt.step,
                dir.file("checkpoint.bin").display()
            );
            Ok(EXIT_OK)
        }
        Command::RlTrain { run, method, init } => {
            let (cfg, r) = load_config(&run, &[("method", method.to_string())])?;
            let init = match &init {
                Some(p) => Checkpoint::load(p)?,
                None => init_checkpoint(&r, &config_hash(&cfg.render()))?,
            };
            let name = format!("rl-{method}");
            let dir = RunDir::acquire(
                &run.out
                    .clone()
                    .unwrap_or_else(|| default_dir(&name, r.seed)),
            )?;
            match run_rl(&cfg, &r, &init, &dir) {
                Ok(st) => {
                    println!(
                        "{method}: {} gradient steps, {} global steps, likelihood NFE {}, sampling NFE {}",
                        st.step, st.global_step, st.nfe.likelihood, st.nfe.sampling
                    );
                    Ok(EXIT_OK)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    Ok(EXIT_FAILURE)
                }
            }
        }
        Command::Eval { run, checkpoint } => {
            let (cfg, r) = load_config(&run, &[])?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dir = RunDir::acquire(
                &run.out
                    .clone()
                    .unwrap_or_else(|| default_dir("eval", r.seed)),
            )?;
            let rep = run_eval(&cfg, &r, &ckpt, &dir)?;
            println!(
                "{}: success {:.4}, mean reward {:.4} over {} prompts",
                rep.task, rep.success, rep.mean_reward, rep.n_prompts
            );
            Ok(EXIT_OK)
        }
        Command::Oracle {
            check,
            seed,
            quick,
            out,
        } => {
            let scale = if quick {
                AuditScale::quick()
            } else {
                AuditScale::full()
            };
            // reject unknown names before touching the filesystem
            if check != "all" {
                check.parse::<Check>()?;
            }
            let dir = RunDir::acquire(
                &out.unwrap_or_else(|| default_dir(&format!("oracle-{check}"), seed)),
            )?;
            let reports = run_oracle(&check, seed, &scale)?;
            dir.write_json("oracle_report.json", &reports)?;
            let mut code = EXIT_OK;
            for rep in &reports {
                println!(
                    "{:<8} {} instances={} worst_slack={:.3e}",
                    rep.check.to_string(),
                    if rep.pass { "PASS" } else { "FAIL" },
                    rep.instances,
                    rep.worst_slack
                );
                if !rep.pass {
                    eprintln!("audit failed: {}", rep.check);
                    code = EXIT_FAILURE;
                }
            }
            Ok(code)
        }
        Command::PlotData { metrics, output } => {
            write_plot_csv(&read_metrics(&metrics)?, &output)?;
            Ok(EXIT_OK)
        }
    }
}
