use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "mionet", version, about = "Subchannel field surrogate: data generation, training, evaluation and inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable); wins over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = parse_key_value)]
    pub set: Vec<(String, String)>,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

#[derive(Subcommand)]
enum Command {
    /// Generate an oracle dataset.
    Generate {
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mesh_nodes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Split, cross-validate, and train the final model.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint path; the training report goes to `<out>.train.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split recorded at training time.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Training report holding the split; defaults to `<model>.train.json`.
        #[arg(long)]
        train_report: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = commands::Split::Test)]
        split: commands::Split,
        #[command(flatten)]
        common: Common,
    },
    /// Predict fields for one operating point and write them as CSV.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Peak rod heat flux, kW/m².
        #[arg(long)]
        p_max: f64,
        /// Inlet temperature, K.
        #[arg(long)]
        t_in: f64,
        /// Inlet velocity, m/s.
        #[arg(long)]
        v_in: f64,
        #[arg(long)]
        out: PathBuf,
        /// Take node coordinates from this dataset instead of regenerating the mesh.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Time eval-mode forwards and one oracle evaluation.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Check the oracle against the entrance-length and Nusselt correlations.
    Validate {
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> mionet::Result<()> {
    match cli.command {
        Command::Generate {
            samples,
            seed,
            mesh_nodes,
            out,
            common,
        } => commands::generate(&common, samples, seed, mesh_nodes, &out),
        Command::Train {
            dataset,
            out,
            folds,
            seed,
            max_epochs,
            common,
        } => commands::train(&common, &dataset, &out, folds, seed, max_epochs),
        Command::Evaluate {
            model,
            dataset,
            report,
            train_report,
            split,
            common,
        } => commands::evaluate(&common, &model, &dataset, &report, train_report.as_deref(), split),
        Command::Infer {
            model,
            p_max,
            t_in,
            v_in,
            out,
            dataset,
            common,
        } => commands::infer(&common, &model, (p_max, t_in, v_in), &out, dataset.as_deref()),
        Command::Bench {
            model,
            iters,
            dataset,
            report,
            common,
        } => commands::bench(&common, &model, iters, &dataset, report.as_deref()),
        Command::Validate { report, common } => commands::validate(&common, report.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
