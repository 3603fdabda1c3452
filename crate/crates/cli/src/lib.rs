//! Experiment harness around `ssn-core`: JSON configuration, the experiment
//! recipes, and CSV/JSON reports.

pub mod config;
pub mod error;
pub mod experiment;
pub mod locate;
pub mod report;

use std::path::Path;

pub use config::{ConfigError, ExperimentConfig};
pub use error::CliError;
pub use experiment::{run_experiment, ResultRow, RunReport};

/// Reads, validates and path-resolves the configuration at `path`.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::parse(&text, path).map_err(CliError::Config)?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    cfg.resolve_paths(base);
    Ok(cfg)
}

/// Parses `SSN_THREADS`; unset or empty means no cap.
pub fn thread_cap(value: Option<&str>) -> Result<Option<usize>, CliError> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("SSN_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}
