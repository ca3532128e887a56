//! The `simulate` verb: experiment spec in, CSV tables and manifest out.

use std::path::{Path, PathBuf};

use selection_bounds::simharness::{run_experiment, write_outputs, ExperimentSpec};
use selection_bounds::Exec;

use crate::error::{CliError, InModule};

pub fn load_spec(path: &Path) -> Result<ExperimentSpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(path.display().to_string(), e.to_string()))?;
    parse_spec(&text)
}

pub fn parse_spec(text: &str) -> Result<ExperimentSpec, CliError> {
    let spec: ExperimentSpec = toml::from_str(text).map_err(|e| CliError::config("spec", e.message().to_string()))?;
    spec.validate().map_err(|e| CliError::config("spec", e.to_string()))?;
    Ok(spec)
}

/// Runs the experiment and writes its tables into `out`.
pub fn run_simulation(spec: &ExperimentSpec, out: &Path, exec: Exec) -> Result<Vec<PathBuf>, CliError> {
    let res = run_experiment(spec, exec).in_module("simharness")?;
    for (k, v) in &res.summary {
        log::info!("{k} = {v}");
    }
    write_outputs(out, spec, &res.tables, &res.summary, res.notes).map_err(|e| CliError::Io(e.to_string()))
}
