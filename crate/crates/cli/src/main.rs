use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use depthlab::par;
use depthlab_cli::{cmd_eval, cmd_gen_data, cmd_prune, cmd_report, cmd_train_teacher, exit_code, RunConfig};

#[derive(Parser)]
#[command(name = "depthlab", version, about = "Layer pruning and distillation on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; defaults apply to omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for candidate evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task suite and distillation corpus.
    GenData,
    /// Train the teacher and record its evaluation.
    TrainTeacher,
    /// Run the configured pruning strategies against the teacher.
    Prune,
    /// Evaluate a saved model on the full suite.
    Eval {
        /// Model checkpoint; the teacher when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Tabulate finished runs.
    Report {
        /// Run directories; every run under the output directory when omitted.
        runs: Vec<PathBuf>,
    },
}

fn config(cli: &Cli) -> depthlab::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if cli.workers == Some(0) {
        return Err(depthlab::Error::Config("--workers must be positive".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &RunConfig) -> depthlab::Result<String> {
    match &cli.command {
        Command::GenData => {
            let data = cmd_gen_data(cfg)?;
            Ok(format!(
                "wrote {} tasks and {} corpus lines to {}",
                data.tasks.len(),
                data.corpus.len(),
                cfg.output_dir.join("data").display()
            ))
        }
        Command::TrainTeacher => {
            let out = cmd_train_teacher(cfg)?;
            Ok(serde_json::to_string_pretty(&out.eval)?)
        }
        Command::Prune => {
            let runs = cmd_prune(cfg)?;
            Ok(runs
                .iter()
                .map(|r| {
                    format!(
                        "{} seed {}: removed {:?}, aggregate {:.4}",
                        r.strategy,
                        r.seed,
                        r.removal_order,
                        r.final_aggregate().unwrap_or(f64::NAN)
                    )
                })
                .collect::<Vec<_>>()
                .join("\n"))
        }
        Command::Eval { model } => Ok(serde_json::to_string_pretty(&cmd_eval(cfg, model.as_deref())?)?),
        Command::Report { runs } => Ok(cmd_report(cfg, runs)?.table_csv()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config(&cli).and_then(|cfg| match cli.workers {
        Some(n) => par::with_workers(n, || run(&cli, &cfg)),
        None => run(&cli, &cfg),
    });
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
