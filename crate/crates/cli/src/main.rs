use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use solvegp::run::{self, GridSpec, RunConfig};
use solvegp::GpError;

/// Sparse variational GP trainer.
#[derive(Parser)]
#[command(name = "solvegp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model described by a JSON run config.
    Fit {
        config: PathBuf,
    },
    /// Print {test_ll, test_rmse} of a saved model.
    #[command(group(ArgGroup::new("data").required(true).args(["config", "csv"])))]
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Use the test split of this run config's dataset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use every row of this CSV file.
        #[arg(long, requires = "target")]
        csv: Option<PathBuf>,
        #[arg(long)]
        target: Option<String>,
        /// With --csv: report metrics in the units of the file.
        #[arg(long)]
        original_units: bool,
    },
    /// Write the latent ±3 std band of a 1D model over a grid.
    Plot1d {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        lo: f64,
        #[arg(long, allow_hyphen_values = true)]
        hi: f64,
        #[arg(long, default_value_t = 200)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to <out stem>_inducing.csv next to --out.
        #[arg(long)]
        inducing_out: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<(), GpError> {
    match cli.command {
        Command::Fit { config } => {
            let cfg = RunConfig::load(&config)?;
            let summary = run::fit(&cfg)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Eval {
            model,
            config,
            csv,
            target,
            original_units,
        } => {
            let metrics = match (config, csv) {
                (Some(c), _) => run::eval_with_config(&model, &RunConfig::load(c)?)?,
                (None, Some(csv)) => run::eval_csv(&model, csv, target.as_deref().unwrap_or_default(), original_units)?,
                (None, None) => unreachable!("clap requires one data source"),
            };
            println!("{}", serde_json::to_string(&metrics)?);
        }
        Command::Plot1d {
            model,
            lo,
            hi,
            points,
            out,
            inducing_out,
        } => {
            let inducing_out = inducing_out.unwrap_or_else(|| {
                let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                out.with_file_name(format!("{stem}_inducing.csv"))
            });
            run::plot1d(&model, &GridSpec { lo, hi, points }, &out, &inducing_out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(run::exit_code(&e) as u8)
        }
    }
}
