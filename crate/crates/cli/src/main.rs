use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use arena_core::diagnostics::{report, FileSink};
use arena_core::engine::{
    load_checkpoint, retention_benchmark, save_checkpoint, Engine, EngineConfig, Mode,
    DEFAULT_SEED,
};
use arena_core::format::{load_adapter, save_adapter};
use arena_core::ops::{apply_operator, OperatorId, OperatorParams};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "arena", version, about = "Teacher/student adapter populations on a mini-language")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Population (or 1T+1S) training run.
    Train(RunArgs),
    /// Single-agent run that generates and solves its own problems.
    Baseline(RunArgs),
    /// Operator retention sweep.
    Retention(RunArgs),
    /// Round-robin evaluation of a checkpoint, printed as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Adapter operators.
    Ops {
        #[command(subcommand)]
        command: OpsCommand,
    },
    /// Figure CSVs and a text summary from one or more run directories.
    Report {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Continue from a checkpoint instead of a fresh state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write `checkpoint_<step>.plck` every this many steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Subcommand)]
enum OpsCommand {
    Apply {
        #[arg(long)]
        op: String,
        #[arg(long)]
        parent: PathBuf,
        #[arg(long)]
        parent2: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// JSON file with operator parameters.
        #[arg(long)]
        params: Option<PathBuf>,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn config(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn load_config(path: &Path, seed: Option<u64>, workers: Option<usize>) -> anyhow::Result<EngineConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg: EngineConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    cfg.seed = Some(seed.or(cfg.seed).unwrap_or(DEFAULT_SEED));
    if workers.is_some() {
        cfg.workers = workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_resolved(cfg: &EngineConfig, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut snapshot = cfg.clone();
    // Thread count never changes results, so keep it out of the snapshot.
    snapshot.workers = None;
    let text = serde_json::to_string_pretty(&snapshot)?;
    fs::write(out.join("config.resolved.json"), text + "\n")?;
    Ok(())
}

fn run_training(args: &RunArgs, mode: Option<Mode>) -> Result<(), Failure> {
    let mut cfg = load_config(&args.config, args.seed, args.workers).config()?;
    if let Some(m) = mode {
        cfg.mode = m;
    } else if cfg.mode == Mode::SingleAgent {
        return Err(Failure::Config(anyhow!(
            "mode single_agent belongs to the baseline subcommand"
        )));
    }
    let (engine, mut state, append) = match &args.resume {
        Some(path) => {
            let (state, saved) = load_checkpoint(path)
                .with_context(|| format!("loading {}", path.display()))
                .runtime()?;
            let mut resumed = saved;
            resumed.steps = cfg.steps;
            resumed.workers = cfg.workers;
            cfg = resumed;
            (Engine::new(cfg.clone()).config()?, state, true)
        }
        None => {
            let engine = Engine::new(cfg.clone()).config()?;
            let state = engine.init_state().runtime()?;
            (engine, state, false)
        }
    };
    write_resolved(&cfg, &args.out).runtime()?;
    let mut sink = FileSink::create(&args.out, append).runtime()?;
    log::info!("{} run from step {} to {}", cfg.mode.name(), state.step, cfg.steps);
    let every = args.checkpoint_every.unwrap_or(0);
    while state.step < cfg.steps {
        let until = if every > 0 {
            ((state.step / every) + 1) * every
        } else {
            cfg.steps
        }
        .min(cfg.steps);
        engine.run_until(&mut state, until, &mut sink).runtime()?;
        if every > 0 && state.step % every == 0 {
            let p = args.out.join(format!("checkpoint_{:05}.plck", state.step));
            save_checkpoint(&state, &cfg, &p).runtime()?;
        }
        log::info!("step {}", state.step);
    }
    sink.flush().runtime()?;
    save_checkpoint(&state, &cfg, &args.out.join("checkpoint.plck")).runtime()?;
    println!("{}", state.state_hash(&cfg));
    Ok(())
}

fn run_retention(args: &RunArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.config, args.seed, args.workers).config()?;
    write_resolved(&cfg, &args.out).runtime()?;
    let rep = retention_benchmark(&cfg).runtime()?;
    let out = &args.out;
    (|| -> anyhow::Result<()> {
        fs::write(out.join("retention.csv"), rep.to_csv())?;
        fs::write(out.join("retention_summary.csv"), rep.summary())?;
        fs::write(out.join("retention.json"), serde_json::to_string(&rep)? + "\n")?;
        Ok(())
    })()
    .runtime()?;
    print!("{}", rep.summary());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => run_training(&a, None),
        Command::Baseline(a) => run_training(&a, Some(Mode::SingleAgent)),
        Command::Retention(a) => run_retention(&a),
        Command::Eval {
            checkpoint,
            workers,
        } => {
            let (state, mut cfg) = load_checkpoint(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))
                .runtime()?;
            cfg.workers = workers;
            let engine = Engine::new(cfg).config()?;
            let summary = engine.evaluate(&state).runtime()?;
            println!("{}", serde_json::to_string_pretty(&summary).runtime()?);
            Ok(())
        }
        Command::Ops {
            command:
                OpsCommand::Apply {
                    op,
                    parent,
                    parent2,
                    out,
                    seed,
                    params,
                },
        } => {
            let id: OperatorId = op.parse().config()?;
            let params: OperatorParams = match params {
                Some(p) => {
                    let text = fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))
                        .config()?;
                    serde_json::from_str(&text).config()?
                }
                None => OperatorParams::default(),
            };
            let mut paths = vec![parent];
            paths.extend(parent2);
            if paths.len() != id.arity() {
                return Err(Failure::Config(anyhow!(
                    "{id} takes {} parent(s), got {}",
                    id.arity(),
                    paths.len()
                )));
            }
            let adapters = paths
                .iter()
                .map(|p| load_adapter(p).with_context(|| format!("loading {}", p.display())))
                .collect::<anyhow::Result<Vec<_>>>()
                .runtime()?;
            let names: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
            let inputs: Vec<_> = names.iter().map(String::as_str).zip(&adapters).collect();
            let child = apply_operator(id, &inputs, &params, seed).runtime()?;
            save_adapter(&child.adapter, &out).runtime()?;
            println!("{}", serde_json::to_string(&child.provenance).runtime()?);
            Ok(())
        }
        Command::Report { runs, out } => {
            let summaries = report(&runs, &out).runtime()?;
            let text = fs::read_to_string(out.join("summary.txt")).runtime()?;
            print!("{text}");
            log::info!("reported {} runs", summaries.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
