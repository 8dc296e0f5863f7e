mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use protodep::dataio::SplitName;

use config::RunConfig;
use failure::Failure;

#[derive(Parser)]
#[command(name = "protodep", version, about = "Prototype-based explainable depression detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset and write a checkpoint, epoch log and test metrics.
    Train(Common),
    /// Metrics, PRIDE and lexicon alignment for a checkpoint on one split.
    Eval(Common),
    /// Explanation report for one user.
    Explain(Common),
    /// Write a synthetic dataset with its ground truth.
    Synth(Common),
    /// Train over a grid of prototype counts and report test F1.
    Sweep(Common),
    /// Finite-difference check of the training gradients on a random state.
    Gradcheck(Common),
}

#[derive(Args, Default)]
struct Common {
    /// TOML (or .json) run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (manifest.json + users.jsonl).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    user_id: Option<String>,
    #[arg(long)]
    top_q: Option<usize>,
    /// Prototype-count grid, e.g. "m=3,7,11;k=3".
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    split: Option<SplitName>,
    #[arg(long)]
    base_prototypes: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

impl Common {
    /// Config file values overridden by flags.
    fn resolve(self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    cfg.$field = Some(v);
                }
            )*};
        }
        set!(data, checkpoint, user_id, base_prototypes, lexicon);
        if let Some(v) = self.out {
            cfg.out = v;
        }
        if let Some(v) = self.top_q {
            cfg.top_q = v;
        }
        if let Some(v) = self.split {
            cfg.split = v;
        }
        if let Some(g) = &self.grid {
            config::parse_grid(g, &mut cfg.sweep)?;
        }
        Ok(cfg.resolve())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(c) => commands::train(&c.resolve()?),
        Command::Eval(c) => commands::eval(&c.resolve()?),
        Command::Explain(c) => commands::explain(&c.resolve()?),
        Command::Synth(c) => commands::synth(&c.resolve()?),
        Command::Sweep(c) => commands::sweep(&c.resolve()?),
        Command::Gradcheck(c) => commands::gradcheck(&c.resolve()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PROTODEP_LOG", "off")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", serde_json::to_string(&f).expect("failure serializes"));
            ExitCode::from(f.code as u8)
        }
    }
}
