use std::fs;
use std::path::{Path, PathBuf};

use cavcool::rates::{self, RateError};
use cavcool::units;
use cavcool::SystemParams;
use clap::Args;
use serde_json::{Map, Value};

use crate::CliError;

/// Parameter sources shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct ParamArgs {
    /// JSON parameter document (trap units, or `"units": "si"`).
    #[arg(long, value_name = "FILE")]
    pub params: Option<PathBuf>,

    /// Override one parameter, e.g. `--set delta_c=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Put Δ on the optimal-detuning curve for the chosen δc.
    #[arg(long)]
    pub opt: bool,
}

fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Invalid(format!("expected KEY=VALUE, got `{s}`")))?;
    let v = v.trim();
    let value = serde_json::from_str::<Value>(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl ParamArgs {
    /// Defaults, then the file, then `--set` flags, then `--opt`.
    pub fn resolve(&self) -> Result<SystemParams, CliError> {
        let mut p = SystemParams::default();
        if let Some(path) = &self.params {
            let text = fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
            let doc: Value = serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
            p = units::params_from_json(&doc, &p).map_err(|e| CliError::Invalid(e.to_string()))?;
        }
        if !self.overrides.is_empty() {
            let mut patch = Map::new();
            for o in &self.overrides {
                let (k, v) = parse_override(o)?;
                patch.insert(k, v);
            }
            p = p.overlay(&patch).map_err(|e| CliError::Invalid(e.to_string()))?;
        }
        let report = p.validate();
        for w in report.warnings() {
            eprintln!("warning: {}: {}", w.field, w.message);
        }
        if let Some(v) = report.violations().next() {
            return Err(CliError::Invalid(format!("{}: {}", v.field, v.message)));
        }
        if self.opt {
            p.delta = rates::delta_opt(p.delta_c, &p).map_err(singular)?;
        }
        Ok(p)
    }
}

pub fn singular(e: RateError) -> CliError {
    CliError::Singular(e.to_string())
}

/// Writes `<out>.config.json` holding the effective configuration.
pub fn write_sidecar(out: &Path, command: &str, params: &SystemParams, options: Value) -> Result<(), CliError> {
    let mut name = out.as_os_str().to_owned();
    name.push(".config.json");
    let doc = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "params": params,
        "options": options,
    });
    let text = serde_json::to_string_pretty(&doc).expect("serializable");
    fs::write(PathBuf::from(name), text + "\n").map_err(|e| CliError::Invalid(format!("{}: {e}", out.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(overrides: &[&str], opt: bool) -> ParamArgs {
        ParamArgs { params: None, overrides: overrides.iter().map(|s| s.to_string()).collect(), opt }
    }

    #[test]
    fn flags_override_defaults() {
        let p = args(&["delta_c=0.5", "omega = 0.01"], false).resolve().unwrap();
        assert_eq!(p.delta_c, 0.5);
        assert_eq!(p.omega, 0.01);
        assert_eq!(p.g, 7.0);
    }

    #[test]
    fn opt_places_delta_on_curve() {
        let p = args(&["delta_c=0.5"], true).resolve().unwrap();
        assert!((p.delta - 31.683_333_333_333_33).abs() < 1e-12);
        assert!(matches!(args(&["delta_c=-1"], true).resolve(), Err(CliError::Singular(_))));
    }

    #[test]
    fn bad_input_rejected() {
        assert!(matches!(args(&["nonsense=1"], false).resolve(), Err(CliError::Invalid(_))));
        assert!(matches!(args(&["kappa=-1"], false).resolve(), Err(CliError::Invalid(_))));
        assert!(matches!(args(&["kappa"], false).resolve(), Err(CliError::Invalid(_))));
    }
}
