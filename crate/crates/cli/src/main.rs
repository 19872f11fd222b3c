//! Command-line driver: corpus generation, training, unlearning, evaluation,
//! ablation sweeps, probes and reports, all under one output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use unlearn_core::experiment::{ExperimentConfig, Runner};
use unlearn_core::unlearn::MethodSpec;
use unlearn_core::{Error, Exec};

#[derive(Parser)]
#[command(name = "unlearn-lab", version, about = "Desk-scale machine unlearning experiments")]
struct Cli {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Fraction of facts in the forget split, overriding the config.
    #[arg(long, global = true)]
    forget_fraction: Option<f64>,
    /// Run batch loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the fact world and its question/answer corpus.
    GenCorpus,
    /// Train the target model on all data and the retain model on the retain side.
    Train,
    /// Unlearn the forget split with one method, or every configured method.
    Unlearn {
        #[arg(long)]
        method: Option<String>,
    },
    /// Evaluate the target, retain and unlearned models.
    Eval,
    /// Sweep one unlearning parameter.
    Ablate,
    /// Layer-rank curves and sensitivity grids for the target or an unlearned model.
    Probe {
        #[arg(long)]
        method: Option<String>,
    },
    /// Tables from stored evaluations plus a manifest audit.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(f) = cli.forget_fraction {
        cfg.world.forget_fraction = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_method(name: &Option<String>) -> Result<Option<MethodSpec>, Error> {
    name.as_deref().map(str::parse).transpose()
}

fn run(cli: &Cli) -> Result<String, Error> {
    let cfg = load_config(cli)?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/seed-{}", cfg.seed)));
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    let runner = Runner::new(cfg, out, cli.force, exec);
    match &cli.command {
        Command::GenCorpus => runner.gen_corpus(),
        Command::Train => runner.train(),
        Command::Unlearn { method } => {
            let methods = match parse_method(method)? {
                Some(m) => vec![m],
                None => runner.config.methods.clone(),
            };
            runner.unlearn(&methods)
        }
        Command::Eval => runner.eval(),
        Command::Ablate => runner.ablate(),
        Command::Probe { method } => runner.probe(parse_method(method)?.as_ref()),
        Command::Report => runner.report(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = serde_json::json!({
                "status": "error",
                "kind": e.kind(),
                "message": e.to_string(),
            });
            eprintln!("{record}");
            if matches!(e, Error::UnknownMethod(_)) {
                eprintln!("{}", Cli::command().render_usage());
            }
            ExitCode::FAILURE
        }
    }
}
