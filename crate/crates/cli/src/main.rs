use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stepwise_cli::commands::{evaluate_cmd, explain_cmd, generate, train_cmd};
use stepwise_cli::config::read_config_text;
use stepwise_cli::sweep::{sweep, write_results, Grid};
use stepwise_cli::{ExperimentConfig, Failure};
use stepwise_core::datapipe::Split;
use stepwise_core::explain::{HeadReduction, LayerChoice, Reduction};

#[derive(Parser)]
#[command(name = "stepwise", version, about = "Step-wise embeddings for tabular time-series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic group-structured dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `data.synthetic.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `data.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint plus per-epoch history.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write attention reports for a checkpoint.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Stay ids whose attention trajectories are written.
        #[arg(long, value_delimiter = ',')]
        stays: Vec<String>,
        /// `last` or a 0-based layer index.
        #[arg(long, default_value = "last", value_parser = parse_layer)]
        layer: LayerChoice,
        /// `mean` or `max` over heads.
        #[arg(long, default_value = "mean", value_parser = parse_heads)]
        heads: HeadReduction,
        #[arg(long, default_value = "explain")]
        out: PathBuf,
    },
    /// Train every grid setting over several seeds and summarize.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "val", value_parser = parse_split)]
        split: Split,
        /// Run settings concurrently.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Data location for commands that start from a checkpoint: `--data`, or
/// `data.dir` of `--config`.
#[derive(clap::Args)]
struct DataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

impl DataArgs {
    fn resolve(&self) -> Result<(PathBuf, f64), Failure> {
        let cfg = self.config.as_deref().map(ExperimentConfig::load).transpose()?;
        let step_hours = cfg.as_ref().map_or(1.0, |c| c.data.step_hours);
        match (&self.data, cfg) {
            (Some(d), _) => Ok((d.clone(), step_hours)),
            (None, Some(c)) => Ok((c.data.dir, step_hours)),
            (None, None) => Err(Failure::config("pass --data DIR or --config PATH")),
        }
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|_| format!("expected train, val or test, got `{s}`"))
}

fn parse_layer(s: &str) -> Result<LayerChoice, String> {
    match s {
        "last" => Ok(LayerChoice::Last),
        n => n.parse().map(LayerChoice::Index).map_err(|_| format!("expected `last` or a layer index, got `{s}`")),
    }
}

fn parse_heads(s: &str) -> Result<HeadReduction, String> {
    match s {
        "mean" => Ok(HeadReduction::Mean),
        "max" => Ok(HeadReduction::Max),
        _ => Err(format!("expected `mean` or `max`, got `{s}`")),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!("{}", generate(&cfg, seed, out.as_deref())?.summary);
        }
        Command::Train { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!("{}", train_cmd(&cfg, seed, out.as_deref())?.summary);
        }
        Command::Evaluate { checkpoint, data, split, out } => {
            let (dir, step_hours) = data.resolve()?;
            let (record, path) = evaluate_cmd(&checkpoint, &dir, step_hours, split, &out)?;
            for (name, value) in &record.metrics {
                println!("{split} {name} {value:.4}");
            }
            println!("wrote {}", path.display());
        }
        Command::Explain { checkpoint, data, split, stays, layer, heads, out } => {
            let (dir, step_hours) = data.resolve()?;
            let written = explain_cmd(&checkpoint, &dir, step_hours, split, &stays, Reduction { layer, heads }, &out)?;
            println!("wrote {} files to {}", written.len(), out.display());
        }
        Command::Sweep { config, grid, seeds, split, parallel, out } => {
            let base: toml::Table =
                read_config_text(&config)?.parse().map_err(|e: toml::de::Error| Failure::config(e.to_string()))?;
            let base_cfg = ExperimentConfig::from_table(base.clone())?;
            let grid = Grid::load(&grid)?;
            let results = sweep(&base, &grid, &seeds, split, parallel)?;
            let out = out.unwrap_or(base_cfg.output.dir);
            write_results(&grid, &results, &out)?;
            println!(
                "swept {} settings x {} seeds on {split}; wrote {}",
                results.len(),
                seeds.len(),
                Path::new(&out).join("sweep.csv").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("stepwise: {f}");
            ExitCode::from(f.code() as u8)
        }
    }
}
