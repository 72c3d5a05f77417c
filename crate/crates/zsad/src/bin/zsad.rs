//! Thin command-line front end over the library runners.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use zsad::runner::{self, RunConfig};
use zsad::{data, Error};

#[derive(Parser)]
#[command(name = "zsad", about = "Zero-shot anomaly detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML or JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the desk-scale stub backbone defaults.
    #[arg(long)]
    stub: bool,
    /// Override the output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override the training dataset root.
    #[arg(long)]
    train_root: Option<PathBuf>,
    /// Override the evaluation dataset root.
    #[arg(long)]
    eval_root: Option<PathBuf>,
    /// Override the random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None if self.stub => RunConfig::stub_defaults(),
            None => RunConfig::default(),
        };
        if let Some(d) = &self.output_dir {
            config.output_dir = d.clone();
        }
        if let Some(d) = &self.train_root {
            config.data.train_root = Some(d.clone());
        }
        if let Some(d) = &self.eval_root {
            config.data.eval_root = Some(d.clone());
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(e) = self.epochs {
            config.optim.epochs = e;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train prompt parameters against a frozen backbone.
    Train(ConfigArgs),
    /// Evaluate a trained checkpoint over the eval split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Prompt checkpoint; omit only in plain_clip mode.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a dataset and print per-image anomaly scores.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset root to score (defaults to the eval root).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score a dataset and write anomaly maps (PNG + float container).
    ExportMaps {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Generate a deterministic synthetic defect dataset.
    GenSynthetic {
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn input_root(config: &RunConfig, input: &Option<PathBuf>) -> Result<PathBuf, Error> {
    input
        .clone()
        .or_else(|| config.data.eval_root.clone())
        .ok_or_else(|| Error::Config("no input dataset: pass --input or set data.eval_root".into()))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(args) => {
            let config = args.load()?;
            let out_dir = config.output_dir.clone();
            let outcome = runner::run_train(&config, &out_dir)?;
            println!(
                "trained: initial loss {:.6}, final loss {:.6}",
                outcome.initial_loss, outcome.final_loss
            );
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("log: {}", outcome.log_path.display());
        }
        Command::Eval { config, checkpoint } => {
            let config = config.load()?;
            let handle = config.load_backbone()?;
            let state = runner::resolve_prompt_state(&config, &handle, checkpoint.as_deref())?;
            let report = runner::run_eval(&config, &handle, &state)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", report.to_markdown());
            let (json_path, md_path) = report.write(&config.output_dir)?;
            println!("wrote {} and {}", json_path.display(), md_path.display());
        }
        Command::Infer {
            config,
            checkpoint,
            input,
        } => {
            let config = config.load()?;
            let handle = config.load_backbone()?;
            let state = runner::resolve_prompt_state(&config, &handle, checkpoint.as_deref())?;
            let root = input_root(&config, &input)?;
            let run = runner::run_infer(&config, &handle, &state, &root)?;
            for w in &run.warnings {
                eprintln!("warning: {w}");
            }
            for r in &run.results {
                println!("{:.6}\t{}", r.image_score, r.rel_path.display());
            }
        }
        Command::ExportMaps {
            config,
            checkpoint,
            input,
        } => {
            let config = config.load()?;
            let handle = config.load_backbone()?;
            let state = runner::resolve_prompt_state(&config, &handle, checkpoint.as_deref())?;
            let root = input_root(&config, &input)?;
            let run = runner::run_infer(&config, &handle, &state, &root)?;
            let out_dir = config.output_dir.join("maps");
            let written = runner::export_maps(&run, &out_dir)?;
            println!("wrote {} files under {}", written.len(), out_dir.display());
        }
        Command::GenSynthetic {
            out,
            seed,
            count,
            size,
        } => {
            data::generate_synthetic_dataset(&out, seed, count, size)?;
            println!("wrote {count} images under {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
