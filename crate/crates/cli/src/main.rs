//! `nvdp`: train, evaluate and probe neural variational dropout processes.

mod config;
mod run;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use nvdp_core::eval::{
    active_learning_run, compute_metrics, export_results, task_seed, Acquisition, ActiveConfig,
    ExportFormat, ResultRow, CSV_HEADER, DEFAULT_ACQUISITIONS, DEFAULT_SAMPLES,
};
use nvdp_core::model::{AnyModel, Checkpoint, ConditionalModel};
use nvdp_core::tasks::{Phase, TaskSampler};
use nvdp_core::train::{train_run, RunStatus};

use config::{parse_kind, EffectiveTrain, FileConfig, TaskSourceSpec, TrainOverrides};
use run::{derived_run_id, runs_root, FileSink, RunDir, RunState};

pub const DESK_EVAL_TASKS: usize = 1000;
pub const PAPER_EVAL_TASKS: usize = 50_000;
pub const DEFAULT_ACTIVE_TASKS: usize = 50;

/// Bad arguments or configuration (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<UsageError> for Failure {
    fn from(e: UsageError) -> Self {
        Failure::Usage(e.0)
    }
}

impl From<nvdp_core::Error> for Failure {
    fn from(e: nvdp_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "nvdp", version, about = "Neural variational dropout processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and metrics under the runs directory.
    Train {
        /// TOML file with [train], [model] and [tasks] sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Score a checkpoint on freshly sampled evaluation tasks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// gp, trig or idx:<path>; defaults to gp.
        #[arg(long, default_value = "gp")]
        task_source: String,
        #[arg(long, conflicts_with = "paper")]
        n_tasks: Option<usize>,
        /// Use the full-size evaluation set (50000 tasks).
        #[arg(long)]
        paper: bool,
        /// Fixed context size; otherwise drawn by the split protocol.
        #[arg(long)]
        context_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        /// Expected model kind; refuses checkpoints of another kind.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long, value_enum, default_value = "csv")]
        format: OutputFormat,
        #[arg(long)]
        image_limit: Option<usize>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Greedy max-variance acquisition against a random-acquisition control.
    ActiveLearn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "gp")]
        task_source: String,
        #[arg(long, default_value_t = DEFAULT_ACTIVE_TASKS)]
        n_tasks: usize,
        #[arg(long, default_value_t = DEFAULT_ACQUISITIONS)]
        acquisitions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long)]
        image_limit: Option<usize>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Print a seeded task stream as JSON lines.
    GenTasks {
        #[arg(long, default_value = "gp")]
        task_source: String,
        #[arg(long, default_value_t = 10)]
        n_tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "eval")]
        phase: PhaseArg,
        #[arg(long)]
        image_limit: Option<usize>,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum PhaseArg {
    Train,
    Eval,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, overrides, run_id } => train(config.as_deref(), &overrides, run_id),
        Command::Eval {
            checkpoint,
            task_source,
            n_tasks,
            paper,
            context_size,
            seed,
            samples,
            kind,
            format,
            image_limit,
            run_id,
        } => {
            let n_tasks = if paper { PAPER_EVAL_TASKS } else { n_tasks.unwrap_or(DESK_EVAL_TASKS) };
            evaluate(EvalArgs {
                checkpoint,
                task_source,
                n_tasks,
                context_size,
                seed,
                samples,
                kind,
                format,
                image_limit,
                run_id,
            })
        }
        Command::ActiveLearn {
            checkpoint,
            task_source,
            n_tasks,
            acquisitions,
            seed,
            samples,
            image_limit,
            run_id,
        } => active_learn(ActiveArgs {
            checkpoint,
            task_source,
            n_tasks,
            acquisitions,
            seed,
            samples,
            image_limit,
            run_id,
        }),
        Command::GenTasks { task_source, n_tasks, seed, phase, image_limit, out } => {
            gen_tasks(&task_source, n_tasks, seed, phase, image_limit, out.as_deref())
        }
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Run `body` inside a fresh run directory, recording failures in the manifest.
fn with_run<F>(run_id: &str, command: &str, config: serde_json::Value, body: F) -> Result<ExitCode, Failure>
where
    F: FnOnce(&mut RunDir) -> Result<(RunState, Option<String>), Failure>,
{
    let mut run = RunDir::create(&runs_root(), run_id, command, config)?;
    match body(&mut run) {
        Ok((state, message)) => {
            run.finish(state, message.clone())?;
            println!("{}", run.path.display());
            if state == RunState::Completed {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("run {run_id} {state:?}: {}", message.unwrap_or_default());
                Ok(ExitCode::from(1))
            }
        }
        Err(failure) => {
            let msg = match &failure {
                Failure::Usage(m) | Failure::Runtime(m) => m.clone(),
            };
            run.finish(RunState::Failed, Some(msg))?;
            Err(failure)
        }
    }
}

fn sampler_for(source: &str, limit: Option<usize>) -> Result<(TaskSourceSpec, TaskSampler), Failure> {
    let spec: TaskSourceSpec = source.parse()?;
    let sampler = spec.sampler(limit)?;
    Ok((spec, sampler))
}

fn write_rows_csv(rows: &[ResultRow], path: &Path, config: &serde_json::Value) -> Result<(), Failure> {
    if rows.is_empty() {
        std::fs::write(path, format!("{CSV_HEADER}\n"))?;
        let mut sidecar = path.as_os_str().to_owned();
        sidecar.push(".config.json");
        std::fs::write(sidecar, serde_json::to_vec_pretty(config)?)?;
        return Ok(());
    }
    export_results(rows, path, ExportFormat::Csv, config)?;
    Ok(())
}

fn train(config: Option<&Path>, overrides: &TrainOverrides, run_id: Option<String>) -> Result<ExitCode, Failure> {
    let file = match config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let mut effective = EffectiveTrain::resolve(&file, overrides)?;
    let sampler = effective.task_source.sampler(effective.image_limit)?;
    if let (Some(epochs), Some(images)) = (effective.epochs, effective.task_source.image_count(&sampler)) {
        let per_epoch = images.div_ceil(effective.train.batch_size) as u64;
        effective.train.iterations = epochs * per_epoch;
    }
    if overrides.validate_every.is_none() && file.train.validate_every.is_none() {
        // Score the final parameters even when no cadence was requested.
        effective.train.validate_every = effective.train.iterations;
    }
    let snapshot = serde_json::to_value(&effective)?;
    let label = format!("{}-s{}", effective.train.model.kind, effective.train.seed);
    let run_id = run_id.unwrap_or_else(|| derived_run_id("train", &label, &snapshot));

    with_run(&run_id, "train", snapshot.clone(), |run| {
        let mut sink = FileSink::new(run)?;
        let outcome = train_run(&effective.train, &sampler, &mut sink);
        let rows = sink.finish()?;
        let outcome = outcome?;
        write_rows_csv(&rows, &run.path.join("metrics.csv"), &snapshot)?;
        run.add_metrics_file("metrics.csv");
        Ok(match outcome.status {
            RunStatus::Completed => (RunState::Completed, None),
            RunStatus::Aborted { step, reason } => (
                RunState::Aborted,
                Some(format!("non-finite {reason} at step {step}; kept parameters of step {}", outcome.checkpoint.step)),
            ),
        })
    })
}

fn load_model(path: &Path, kind: Option<&str>) -> Result<(Checkpoint, AnyModel), Failure> {
    let ckpt = Checkpoint::load(path)?;
    if let Some(name) = kind {
        let expected = parse_kind(name)?;
        if expected != ckpt.config.kind {
            return Err(Failure::Usage(format!(
                "checkpoint {} holds a {} model, not {expected}",
                path.display(),
                ckpt.config.kind
            )));
        }
    }
    let model = AnyModel::from_checkpoint(&ckpt)?;
    Ok((ckpt, model))
}

fn check_dims(model: &AnyModel, sampler: &TaskSampler) -> Result<(), Failure> {
    let cfg = model.config();
    if cfg.x_dim != sampler.x_dim() || cfg.y_dim != sampler.y_dim() {
        return Err(Failure::Runtime(format!(
            "checkpoint expects x_dim {} / y_dim {}, task source provides {} / {}",
            cfg.x_dim,
            cfg.y_dim,
            sampler.x_dim(),
            sampler.y_dim()
        )));
    }
    Ok(())
}

struct EvalArgs {
    checkpoint: PathBuf,
    task_source: String,
    n_tasks: usize,
    context_size: Option<usize>,
    seed: u64,
    samples: usize,
    kind: Option<String>,
    format: OutputFormat,
    image_limit: Option<usize>,
    run_id: Option<String>,
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    checkpoint: &'a Path,
    task_source: &'a TaskSourceSpec,
    n_tasks: usize,
    context_size: Option<usize>,
    seed: u64,
    samples: usize,
    format: OutputFormat,
}

fn evaluate(args: EvalArgs) -> Result<ExitCode, Failure> {
    if args.n_tasks == 0 || args.samples == 0 {
        return Err(Failure::Usage("--n-tasks and --samples must be >= 1".into()));
    }
    let (ckpt, model) = load_model(&args.checkpoint, args.kind.as_deref())?;
    let (spec, sampler) = sampler_for(&args.task_source, args.image_limit)?;
    check_dims(&model, &sampler)?;
    let snapshot = serde_json::to_value(EvalSnapshot {
        checkpoint: &args.checkpoint,
        task_source: &spec,
        n_tasks: args.n_tasks,
        context_size: args.context_size,
        seed: args.seed,
        samples: args.samples,
        format: args.format,
    })?;
    let label = format!("{}-s{}", ckpt.config.kind, args.seed);
    let run_id = args.run_id.clone().unwrap_or_else(|| derived_run_id("eval", &label, &snapshot));

    with_run(&run_id, "eval", snapshot.clone(), |run| {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let tasks = (0..args.n_tasks)
            .map(|_| match args.context_size {
                Some(s) => sampler.eval_task_with_context(s, &mut rng),
                None => sampler.eval_task(&mut rng),
            })
            .collect::<nvdp_core::Result<Vec<_>>>()?;
        let report = compute_metrics(&model, &tasks, args.samples, args.seed)?;
        let rows = vec![ResultRow::from_record(ckpt.step, &report.record)];
        let name = match args.format {
            OutputFormat::Csv => {
                export_results(&rows, &run.path.join("metrics.csv"), ExportFormat::Csv, &snapshot)?;
                "metrics.csv"
            }
            OutputFormat::Json => {
                export_results(&rows, &run.path.join("metrics.json"), ExportFormat::Json, &snapshot)?;
                "metrics.json"
            }
        };
        run.add_metrics_file(name);
        let r = &report.record;
        eprintln!(
            "{}: ll {:.4} rll {:.4} pll {:.4} over {} tasks",
            r.model, r.ll, r.rll, r.pll, r.task_count
        );
        Ok((RunState::Completed, None))
    })
}

struct ActiveArgs {
    checkpoint: PathBuf,
    task_source: String,
    n_tasks: usize,
    acquisitions: usize,
    seed: u64,
    samples: usize,
    image_limit: Option<usize>,
    run_id: Option<String>,
}

/// One line of `active.csv`.
#[derive(Debug, Serialize)]
struct ActiveRow<'a> {
    task: usize,
    strategy: &'a str,
    step: usize,
    context_size: usize,
    ll: f64,
    rll: f64,
    pll: f64,
}

fn active_learn(args: ActiveArgs) -> Result<ExitCode, Failure> {
    if args.n_tasks == 0 {
        return Err(Failure::Usage("--n-tasks must be >= 1".into()));
    }
    let (ckpt, model) = load_model(&args.checkpoint, None)?;
    let (spec, sampler) = sampler_for(&args.task_source, args.image_limit)?;
    check_dims(&model, &sampler)?;
    let snapshot = serde_json::json!({
        "checkpoint": args.checkpoint,
        "task_source": spec,
        "n_tasks": args.n_tasks,
        "acquisitions": args.acquisitions,
        "seed": args.seed,
        "samples": args.samples,
    });
    let label = format!("{}-s{}", ckpt.config.kind, args.seed);
    let run_id = args.run_id.clone().unwrap_or_else(|| derived_run_id("active", &label, &snapshot));

    with_run(&run_id, "active-learn", snapshot, |run| {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let mut w = csv::Writer::from_path(run.path.join("active.csv"))?;
        let strategies = [("max-variance", Acquisition::MaxVariance), ("random", Acquisition::Random)];
        let mut final_ll = [0.0; 2];
        for task_index in 0..args.n_tasks {
            let task = sampler.eval_task(&mut rng)?;
            let seed = task_seed(args.seed, &task);
            for (slot, (name, strategy)) in strategies.iter().enumerate() {
                let cfg = ActiveConfig {
                    acquisitions: args.acquisitions,
                    realizations: args.samples,
                    strategy: *strategy,
                };
                let traj = active_learning_run(&model, &task, cfg, seed)?;
                for (step, s) in traj.steps.iter().enumerate() {
                    w.serialize(ActiveRow {
                        task: task_index,
                        strategy: name,
                        step,
                        context_size: s.context_size,
                        ll: s.ll,
                        rll: s.rll,
                        pll: s.pll,
                    })?;
                }
                final_ll[slot] += traj.steps.last().map_or(0.0, |s| s.ll);
            }
        }
        w.flush()?;
        run.add_metrics_file("active.csv");
        let n = args.n_tasks as f64;
        eprintln!(
            "mean ll after {} acquisitions: max-variance {:.4}, random {:.4}",
            args.acquisitions,
            final_ll[0] / n,
            final_ll[1] / n
        );
        Ok((RunState::Completed, None))
    })
}

#[derive(Serialize)]
struct TaskDump<'a> {
    index: usize,
    meta: &'a nvdp_core::tasks::TaskMeta,
    xs: Vec<Vec<f64>>,
    ys: Vec<Vec<f64>>,
    context: &'a [usize],
    target: &'a [usize],
}

fn gen_tasks(
    source: &str,
    n_tasks: usize,
    seed: u64,
    phase: PhaseArg,
    limit: Option<usize>,
    out: Option<&Path>,
) -> Result<ExitCode, Failure> {
    let (_, sampler) = sampler_for(source, limit)?;
    let mut sink: Box<dyn Write> = match out {
        Some(path) => Box::new(std::io::BufWriter::new(std::fs::File::create(path)?)),
        None => Box::new(std::io::BufWriter::new(std::io::stdout().lock())),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = match phase {
        PhaseArg::Train => Phase::Train,
        PhaseArg::Eval => Phase::Eval,
    };
    let rows = |m: &nvdp_core::diff::Matrix| m.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    for index in 0..n_tasks {
        let task = match phase {
            Phase::Train => sampler.train_task(&mut rng)?,
            Phase::Eval => sampler.eval_task(&mut rng)?,
        };
        let dump = TaskDump {
            index,
            meta: &task.meta,
            xs: rows(&task.xs),
            ys: rows(&task.ys),
            context: &task.context,
            target: &task.target,
        };
        serde_json::to_writer(&mut sink, &dump)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(ExitCode::SUCCESS)
}
