use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ssn_cli::report::write_atomic;
use ssn_cli::{load_config, run_experiment, thread_cap, CliError};
use ssn_core::data::load_matrix_csv;
use ssn_core::network::load_model;

#[derive(Parser)]
#[command(name = "ssn", version, about = "Deep censored multi-task regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration file without running anything.
    Validate { config: PathBuf },
    /// Run the experiment described by a configuration file.
    Run { config: PathBuf },
    /// Predict targets for a feature table with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use only the first `depth` layers.
        #[arg(long)]
        depth: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { config } => load_config(&config).map(|_| ()),
        Command::Run { config } => run(&config),
        Command::Predict {
            model,
            features,
            out,
            depth,
        } => predict(&model, &features, &out, depth),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(config: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let threads = thread_cap(std::env::var("SSN_THREADS").ok().as_deref())?;
    let report = run_experiment(&cfg, threads)?;
    eprintln!(
        "{} cells, {} failed; results in {}",
        report.cells,
        report.failed_cells,
        report.output_dir.display()
    );
    Ok(())
}

fn predict(model: &Path, features: &Path, out: &Path, depth: Option<usize>) -> Result<(), CliError> {
    let net = load_model(model).map_err(|e| CliError::Io(format!("{}: {e}", model.display())))?;
    let (_, x) = load_matrix_csv(features).map_err(CliError::input)?;
    if x.ncols() != net.input_dim() {
        return Err(CliError::Io(format!(
            "{}: model expects {} feature columns, table has {}",
            features.display(),
            net.input_dim(),
            x.ncols()
        )));
    }
    let y = net
        .forward_batch(x.view(), depth)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let header: Vec<String> = (0..y.ncols()).map(|t| format!("y{t}")).collect();
    write_atomic(out, |w| {
        writeln!(w, "{}", header.join(","))?;
        for row in y.rows() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    })
}
