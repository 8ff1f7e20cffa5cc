use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod evaluate;
mod model;

use config::{config_error, ConfigError, Method, RunConfig};

#[derive(Parser)]
#[command(name = "mwal", version, about = "Align several embedding spaces into one shared coordinate system")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic matched dataset and its manifest.
    Synth(SynthArgs),
    /// Fit preprocessing and an alignment model on the train split.
    Fit(RunArgs),
    /// Register one more space in a fitted gpa/gcpa universe.
    Add(AddArgs),
    /// Map a matrix from one fitted space into another.
    Translate(TranslateArgs),
    /// Evaluate a fitted model on the test split.
    Eval(EvalArgs),
    /// Fit gcpa over a (tau, lambda) grid and tabulate test metrics.
    Sweep(RunArgs),
}

/// Settings that may come from the config file or the command line.
#[derive(Args)]
struct Overrides {
    /// RunConfig JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long)]
    seed: Option<u64>,
    /// Give gcpa outputs their GPA row norms instead of unit length.
    #[arg(long)]
    rescale_gpa_norm: bool,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Shared rank for gcca.
    #[arg(long)]
    rank: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.rescale_gpa_norm {
            cfg.gcpa.rescale_gpa_norm = true;
        }
        if let Some(t) = self.tau {
            cfg.gcpa.tau = t;
        }
        if let Some(l) = self.lambda {
            cfg.gcpa.lambda = l;
        }
        if let Some(r) = self.rank {
            cfg.gcca.rank = Some(r);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic spec JSON file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AddArgs {
    /// Fitted model directory.
    #[arg(long)]
    model: PathBuf,
    /// Train-split rows of the new space, with sample ids.
    #[arg(long)]
    space_file: PathBuf,
    #[arg(long)]
    space_id: String,
    /// Destination model directory; may equal --model.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Raw rows of the `--from` space.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    from: String,
    #[arg(long)]
    to: String,
    /// Output file, in the preprocessed coordinates of `--to`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.out.clone())
        .ok_or_else(|| config_error("no output directory: pass --out or set `out` in the config"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a.config, a.seed, &a.out),
        Command::Fit(a) => {
            let cfg = a.overrides.resolve()?;
            let out = out_dir(a.out, &cfg)?;
            commands::fit(&a.manifest, &cfg, &out)
        }
        Command::Add(a) => commands::add(&a.model, &a.space_file, &a.space_id, &a.out),
        Command::Translate(a) => commands::translate(&a.model, &a.input, &a.from, &a.to, &a.out),
        Command::Eval(a) => {
            let cfg = a.overrides.resolve()?;
            let out = out_dir(a.out, &cfg)?;
            evaluate::eval(&a.model, &a.manifest, &cfg, a.overrides.method, &out)
        }
        Command::Sweep(a) => {
            let cfg = a.overrides.resolve()?;
            let out = out_dir(a.out, &cfg)?;
            evaluate::sweep(&a.manifest, &cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
